//! On-disk formats: `.rbt` tensors, model files, PGM maps and CSV numbers.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};

use crate::error::{EdlError, Result};
use crate::evidence::LabelField;
use crate::net::NetParams;
use crate::synthdata::{SynthImage, N_TISSUE_CLASSES};

pub const TENSOR_MAGIC: &[u8; 6] = b"RBEDL1";
pub const MODEL_MAGIC: &[u8; 7] = b"RBEDLM1";
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    fn code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::U8(_) => 1,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(EdlError::ShapeMismatch(format!(
                "shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, values: impl IntoIterator<Item = f64>) -> Result<Self> {
        Self::new(
            shape,
            TensorData::F32(values.into_iter().map(|v| v as f32).collect()),
        )
    }

    pub fn to_f64(&self) -> Result<Vec<f64>> {
        match &self.data {
            TensorData::F32(v) => Ok(v.iter().map(|&x| f64::from(x)).collect()),
            TensorData::U8(_) => Err(EdlError::Format("expected a float32 tensor".into())),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            TensorData::F32(_) => Err(EdlError::Format("expected a u8 tensor".into())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = TENSOR_MAGIC.to_vec();
        out.push(self.data.code());
        write_shape(&mut out, &self.shape);
        match &self.data {
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(TENSOR_MAGIC.len())? != TENSOR_MAGIC {
            return Err(EdlError::Format("not an .rbt tensor".into()));
        }
        let code = r.take(1)?[0];
        let shape = r.shape()?;
        let n: usize = shape.iter().product();
        let data = match code {
            0 => TensorData::F32(r.f32s(n)?),
            1 => TensorData::U8(r.take(n)?.to_vec()),
            other => return Err(EdlError::Format(format!("unknown dtype code {other}"))),
        };
        r.finish()?;
        Tensor::new(shape, data)
    }
}

fn write_shape(out: &mut Vec<u8>, shape: &[usize]) {
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| EdlError::Format("truncated file".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn shape(&mut self) -> Result<Vec<usize>> {
        let rank = self.u32()?;
        if rank > MAX_RANK {
            return Err(EdlError::Format(format!("rank {rank} too large")));
        }
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        match n {
            Some(n) if n <= self.bytes.len() => Ok(shape),
            _ => Err(EdlError::Format(format!("implausible shape {shape:?}"))),
        }
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| EdlError::Format("tensor too large".into()))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(EdlError::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| {
            EdlError::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
    Ok(buf)
}

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path).map_err(|e| {
        EdlError::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn write_rbt(path: &Path, tensor: &Tensor) -> Result<()> {
    write_file(path, &tensor.to_bytes())
}

pub fn read_rbt(path: &Path) -> Result<Tensor> {
    Tensor::from_bytes(&read_file(path)?)
}

/// Model file: magic, `u32 C_in`, `u32 K`, then every tensor as rank, dims and float32 payload.
pub fn model_to_bytes(params: &NetParams) -> Vec<u8> {
    let mut out = MODEL_MAGIC.to_vec();
    out.extend_from_slice(&(params.c_in() as u32).to_le_bytes());
    out.extend_from_slice(&(params.k_classes() as u32).to_le_bytes());
    for (shape, values) in params.shapes().iter().zip(params.tensors()) {
        write_shape(&mut out, shape);
        values
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes()));
    }
    out
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<NetParams> {
    let mut r = Reader::new(bytes);
    if r.take(MODEL_MAGIC.len())? != MODEL_MAGIC {
        return Err(EdlError::Format("not a model file".into()));
    }
    let c_in = r.u32()?;
    let k = r.u32()?;
    if c_in == 0 || k < 2 {
        return Err(EdlError::Format(format!(
            "invalid model dimensions C_in = {c_in}, K = {k}"
        )));
    }
    let mut tensors = Vec::with_capacity(6);
    for _ in 0..6 {
        let shape = r.shape()?;
        let values = r.f32s(shape.iter().product())?;
        tensors.push((shape, values.into_iter().map(f64::from).collect()));
    }
    r.finish()?;
    NetParams::from_tensors(c_in, k, tensors)
}

pub fn save_model(path: &Path, params: &NetParams) -> Result<()> {
    write_file(path, &model_to_bytes(params))
}

pub fn load_model(path: &Path) -> Result<NetParams> {
    model_from_bytes(&read_file(path)?)
}

/// Rounds parameters through the float32 model representation.
pub fn quantize_model(params: &NetParams) -> NetParams {
    model_from_bytes(&model_to_bytes(params)).expect("round trip of a valid model")
}

/// Binary P5 greyscale image, maxval 255.
pub fn pgm_bytes(pixels: &Array2<u8>) -> Vec<u8> {
    let (h, w) = pixels.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(pixels.iter());
    out
}

/// `round(255 * v)` for values in `[0, 1]`.
pub fn unit_to_grey(values: &Array2<f64>) -> Array2<u8> {
    values.mapv(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
}

pub fn write_pgm(path: &Path, pixels: &Array2<u8>) -> Result<()> {
    write_file(path, &pgm_bytes(pixels))
}

/// Parses a P5 image without comments.
pub fn parse_pgm(bytes: &[u8]) -> Result<Array2<u8>> {
    let bad = || EdlError::Format("malformed PGM".into());
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let payload = bytes.get(pos + 1..).ok_or_else(bad)?;
    Array2::from_shape_vec((h, w), payload.to_vec()).map_err(|_| bad())
}

/// `%.6g`-style formatting: 6 significant digits, no trailing zeros, `.` decimal.
pub fn fmt_sig6(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!(
            "{}e{sign}{:02}",
            trim_zeros(mantissa.to_string()),
            exp.abs()
        )
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Joins rows into LF-terminated CSV text.
pub fn csv_text(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Parses simple comma-separated text with a header row.
pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut lines = text.lines().filter(|l| !l.is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| EdlError::Format("empty CSV".into()))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows: Vec<Vec<String>> = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    if let Some(bad) = rows.iter().find(|r| r.len() != header.len()) {
        return Err(EdlError::Format(format!(
            "CSV row has {} fields, header has {}",
            bad.len(),
            header.len()
        )));
    }
    Ok((header, rows))
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

fn image_name(index: usize) -> String {
    format!("{index:04}.rbt")
}

/// Writes one image as `images/`, `labels/` and `mask/` tensors under `dir`.
pub fn write_sample(dir: &Path, index: usize, img: &SynthImage) -> Result<()> {
    let (c, h, w) = img.channels.dim();
    let name = image_name(index);
    let images = Tensor::from_f64(vec![c, h, w], img.channels.iter().copied())?;
    let labels = Tensor::new(
        vec![h, w],
        TensorData::U8(img.labels.labels().iter().copied().collect()),
    )?;
    let mask = Tensor::new(
        vec![h, w],
        TensorData::U8(img.domain_mask().iter().map(|&m| u8::from(m)).collect()),
    )?;
    write_rbt(&dir.join("images").join(&name), &images)?;
    write_rbt(&dir.join("labels").join(&name), &labels)?;
    write_rbt(&dir.join("mask").join(&name), &mask)
}

pub fn read_sample(dir: &Path, index: usize) -> Result<SynthImage> {
    let name = image_name(index);
    let images = read_rbt(&dir.join("images").join(&name))?;
    let labels = read_rbt(&dir.join("labels").join(&name))?;
    let mask = read_rbt(&dir.join("mask").join(&name))?;
    let [c, h, w] = images.shape[..] else {
        return Err(EdlError::Format(format!(
            "image tensor must be rank 3, got {:?}",
            images.shape
        )));
    };
    if labels.shape != [h, w] || mask.shape != [h, w] {
        return Err(EdlError::Format(
            "label/mask tensors do not match the image grid".into(),
        ));
    }
    let channels = Array3::from_shape_vec((c, h, w), images.to_f64()?).expect("checked shape");
    let label_grid =
        Array2::from_shape_vec((h, w), labels.as_u8()?.to_vec()).expect("checked shape");
    let mask_grid = Array2::from_shape_vec((h, w), mask.as_u8()?.iter().map(|&m| m != 0).collect())
        .expect("checked shape");
    let labels = LabelField::new(label_grid, mask_grid, N_TISSUE_CLASSES)?;
    Ok(SynthImage { channels, labels })
}

/// Sorted indices of the `images/NNNN.rbt` files in a split directory.
pub fn list_samples(dir: &Path) -> Result<Vec<usize>> {
    let images = dir.join("images");
    let entries = fs::read_dir(&images).map_err(|e| {
        EdlError::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", images.display()),
        ))
    })?;
    let mut indices = Vec::new();
    for entry in entries {
        let path: PathBuf = entry?.path();
        if path.extension().is_some_and(|e| e == "rbt") {
            if let Some(idx) = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse().ok())
            {
                indices.push(idx);
            }
        }
    }
    indices.sort_unstable();
    Ok(indices)
}

pub fn read_split(dir: &Path) -> Result<Vec<SynthImage>> {
    list_samples(dir)?
        .into_iter()
        .map(|i| read_sample(dir, i))
        .collect()
}
