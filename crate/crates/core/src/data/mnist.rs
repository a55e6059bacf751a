use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, mismatch, Error, Result};
use crate::io::{load_matrix, save_matrix, SAMPLES_MAGIC};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Denominator floor used by [`Standardizer`].
pub const STANDARDIZE_EPS: f64 = 1e-8;

/// Raw 8-bit images with their labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageSet {
    pub rows: usize,
    pub cols: usize,
    /// Image-major pixel bytes.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows * self.cols
    }

    /// Image `i` as a vector of raw pixel values.
    pub fn image(&self, i: usize) -> DVector<f64> {
        let d = self.dim();
        DVector::from_iterator(d, self.pixels[i * d..(i + 1) * d].iter().map(|&p| f64::from(p)))
    }

    /// The listed images, one per row.
    pub fn matrix(&self, idx: &[usize]) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(idx.len(), d, |r, c| f64::from(self.pixels[idx[r] * d + c]))
    }

    /// The first `k` images.
    pub fn head(&self, k: usize) -> ImageSet {
        let k = k.min(self.len());
        ImageSet {
            rows: self.rows,
            cols: self.cols,
            pixels: self.pixels[..k * self.dim()].to_vec(),
            labels: self.labels[..k].to_vec(),
        }
    }
}

fn fmt_err(offset: u64, message: impl Into<String>) -> Error {
    Error::Format { offset, message: message.into() }
}

fn read_header<R: Read>(r: &mut R, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let found = r.read_u32::<BigEndian>().map_err(|_| fmt_err(0, "file ends inside the magic number"))?;
    if found != magic {
        return Err(fmt_err(0, format!("expected magic {magic:#010x}, found {found:#010x}")));
    }
    (0..dims)
        .map(|i| {
            let offset = 4 + 4 * i as u64;
            r.read_u32::<BigEndian>()
                .map(|v| v as usize)
                .map_err(|_| fmt_err(offset, "file ends inside the dimension header"))
        })
        .collect()
}

fn read_payload<R: Read>(r: &mut R, header: u64, len: usize) -> Result<Vec<u8>> {
    let mut data = Vec::with_capacity(len);
    let got = r.take(len as u64).read_to_end(&mut data).map_err(|e| fmt_err(header, e.to_string()))?;
    if got < len {
        return Err(fmt_err(header + got as u64, format!("payload truncated: {got} of {len} bytes")));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| fmt_err(header, e.to_string()))? != 0 {
        return Err(fmt_err(header + len as u64, "trailing bytes after payload"));
    }
    Ok(data)
}

/// Parses an IDX image file: returns `(count, rows, cols, pixels)`.
pub fn read_idx_images<R: Read>(mut r: R) -> Result<(usize, usize, usize, Vec<u8>)> {
    let dims = read_header(&mut r, IDX_IMAGES_MAGIC, 3)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    let pixels = read_payload(&mut r, 16, count * rows * cols)?;
    Ok((count, rows, cols, pixels))
}

/// Parses an IDX label file; every label must be a digit.
pub fn read_idx_labels<R: Read>(mut r: R) -> Result<Vec<u8>> {
    let dims = read_header(&mut r, IDX_LABELS_MAGIC, 1)?;
    let labels = read_payload(&mut r, 8, dims[0])?;
    if let Some(i) = labels.iter().position(|&l| l > 9) {
        return Err(fmt_err(8 + i as u64, format!("label {} is not a digit", labels[i])));
    }
    Ok(labels)
}

pub fn write_idx_images<W: Write>(mut w: W, rows: usize, cols: usize, pixels: &[u8]) -> std::io::Result<()> {
    let count = pixels.len() / (rows * cols).max(1);
    w.write_u32::<BigEndian>(IDX_IMAGES_MAGIC)?;
    for d in [count, rows, cols] {
        w.write_u32::<BigEndian>(d as u32)?;
    }
    w.write_all(pixels)?;
    w.flush()
}

pub fn write_idx_labels<W: Write>(mut w: W, labels: &[u8]) -> std::io::Result<()> {
    w.write_u32::<BigEndian>(IDX_LABELS_MAGIC)?;
    w.write_u32::<BigEndian>(labels.len() as u32)?;
    w.write_all(labels)?;
    w.flush()
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Format { offset, message } => {
            Error::Format { offset, message: format!("{}: {message}", path.display()) }
        }
        other => other,
    }
}

/// Loads a pair of IDX files.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<ImageSet> {
    let (count, rows, cols, pixels) = read_idx_images(open(images_path)?).map_err(|e| with_path(images_path, e))?;
    let labels = read_idx_labels(open(labels_path)?).map_err(|e| with_path(labels_path, e))?;
    if labels.len() != count {
        return Err(mismatch(format!("{count} images but {} labels", labels.len())));
    }
    Ok(ImageSet { rows, cols, pixels, labels })
}

/// Locations of the four official files inside one directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MnistFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistFiles {
    pub fn in_dir(dir: &Path) -> Self {
        MnistFiles {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
        }
    }

    pub fn all_exist(&self) -> bool {
        [&self.train_images, &self.train_labels, &self.test_images, &self.test_labels].iter().all(|p| p.is_file())
    }

    /// The files under `$MNIST_DIR`, if that variable is set and they exist.
    pub fn from_env() -> Option<Self> {
        let dir = std::env::var_os("MNIST_DIR")?;
        let files = MnistFiles::in_dir(Path::new(&dir));
        files.all_exist().then_some(files)
    }
}

/// Saves `<stem>_images.bin` (pixel values in the matrix container) and
/// `<stem>_labels.csv` (sample id, label).
pub fn save_image_set(dir: &Path, stem: &str, set: &ImageSet) -> Result<()> {
    let path = dir.join(format!("{stem}_images.bin"));
    let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(f);
    let mut write = || -> std::io::Result<()> {
        w.write_all(&SAMPLES_MAGIC)?;
        w.write_u32::<LittleEndian>(set.len() as u32)?;
        w.write_u32::<LittleEndian>(set.dim() as u32)?;
        for &p in &set.pixels {
            w.write_f64::<LittleEndian>(f64::from(p))?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(format!("{stem}_labels.csv"));
    let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(f);
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "sample_id,label,rows,cols")?;
        for (i, l) in set.labels.iter().enumerate() {
            writeln!(w, "{i},{l},{},{}", set.rows, set.cols)?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(&path, e))
}

pub fn load_image_set(dir: &Path, stem: &str) -> Result<ImageSet> {
    let path = dir.join(format!("{stem}_labels.csv"));
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut labels = Vec::new();
    let (mut rows, mut cols) = (0, 0);
    let mut offset = 0u64;
    for (i, line) in text.lines().enumerate() {
        if i > 0 {
            let f: Vec<&str> = line.split(',').collect();
            let parsed = (f.len() == 4)
                .then(|| Some((f[1].parse::<u8>().ok()?, f[2].parse::<usize>().ok()?, f[3].parse::<usize>().ok()?)))
                .flatten();
            let (l, r, c) = parsed.ok_or_else(|| fmt_err(offset, format!("line {}: malformed row", i + 1)))?;
            labels.push(l);
            (rows, cols) = (r, c);
        }
        offset += line.len() as u64 + 1;
    }
    let path = dir.join(format!("{stem}_images.bin"));
    let m = load_matrix(&path, SAMPLES_MAGIC)?;
    if m.nrows() != labels.len() || (m.nrows() > 0 && m.ncols() != rows * cols) {
        return Err(mismatch(format!("{}x{} pixel matrix for {} labels", m.nrows(), m.ncols(), labels.len())));
    }
    let mut pixels = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            let v = m[(r, c)];
            if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                return Err(invalid(format!("pixel ({r}, {c}) = {v} is not a byte value")));
            }
            pixels.push(v as u8);
        }
    }
    Ok(ImageSet { rows, cols, pixels, labels })
}

/// Per-feature affine map to zero mean and unit variance, fitted on a
/// training split and reused for the others.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: DVector<f64>,
    /// `max(std, STANDARDIZE_EPS)`, so constant features map to zero.
    pub scale: DVector<f64>,
}

impl Standardizer {
    /// Fits on the rows of `samples` (population variance).
    pub fn fit(samples: &DMatrix<f64>) -> Result<Self> {
        let n = samples.nrows();
        if n == 0 {
            return Err(invalid("cannot standardize an empty set"));
        }
        let d = samples.ncols();
        let mut mean = DVector::zeros(d);
        let mut scale = DVector::zeros(d);
        for c in 0..d {
            let col = samples.column(c);
            let mu = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            mean[c] = mu;
            scale[c] = var.sqrt().max(STANDARDIZE_EPS);
        }
        Ok(Standardizer { mean, scale })
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.mean.len() {
            return Err(mismatch(format!("sample length {} vs {}", x.len(), self.mean.len())));
        }
        Ok(DVector::from_fn(x.len(), |i, _| (x[i] - self.mean[i]) / self.scale[i]))
    }

    /// Standardizes every row.
    pub fn apply_rows(&self, samples: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if samples.ncols() != self.mean.len() {
            return Err(mismatch(format!("{} columns vs {}", samples.ncols(), self.mean.len())));
        }
        Ok(DMatrix::from_fn(samples.nrows(), samples.ncols(), |r, c| {
            (samples[(r, c)] - self.mean[c]) / self.scale[c]
        }))
    }

    /// Two-row matrix container: means, then scales.
    pub fn save(&self, path: &Path) -> Result<()> {
        let d = self.mean.len();
        let m = DMatrix::from_fn(2, d, |r, c| if r == 0 { self.mean[c] } else { self.scale[c] });
        save_matrix(path, SAMPLES_MAGIC, &m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m = load_matrix(path, SAMPLES_MAGIC)?;
        if m.nrows() != 2 {
            return Err(fmt_err(4, format!("expected 2 rows, found {}", m.nrows())));
        }
        Ok(Standardizer { mean: m.row(0).transpose(), scale: m.row(1).transpose() })
    }
}
