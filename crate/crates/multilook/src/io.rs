//! File formats: the `CFLD` complex-field container, binary PGM images,
//! grayscale image loading, and flat key=value run configuration.
//!
//! `CFLD` layout:
//!
//! ```text
//! CFLD1\n
//! <rows> <cols> <looks> <sigma_z> <alpha_true_or_-1> <seed>\n
//! <looks * rows * cols complex values, look-major then row-major,
//!  each as two little-endian f64 (real, imaginary)>
//! ```
//!
//! Floats in the header are printed with Rust's shortest round-trip
//! formatting, so `read(write(m))` reproduces every value bit-exactly.
//! The parser rejects any deviation from this grammar.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::field::ComplexField;

const CFLD_MAGIC: &[u8] = b"CFLD1\n";

/// Contents of a `CFLD` file. The aperture is not part of the container;
/// reconstruction receives it separately.
#[derive(Debug, Clone, PartialEq)]
pub struct CfldData {
    pub looks: Vec<ComplexField>,
    pub sigma_z: f64,
    /// Ground-truth correlation for synthetic data, when recorded.
    pub alpha_true: Option<f64>,
    pub seed: u64,
}

impl CfldData {
    pub fn rows(&self) -> usize {
        self.looks[0].height()
    }

    pub fn cols(&self) -> usize {
        self.looks[0].width()
    }
}

pub fn write_cfld(
    path: &Path,
    looks: &[ComplexField],
    sigma_z: f64,
    alpha_true: Option<f64>,
    seed: u64,
) -> Result<()> {
    if looks.is_empty() {
        return Err(Error::invalid("cfld: need at least one look"));
    }
    let (rows, cols) = (looks[0].height(), looks[0].width());
    if looks.iter().any(|l| l.height() != rows || l.width() != cols) {
        return Err(Error::dims("cfld: looks must share dimensions"));
    }
    if !(sigma_z > 0.0) {
        return Err(Error::invalid("cfld: sigma_z must be > 0"));
    }
    if let Some(a) = alpha_true {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::invalid("cfld: alpha_true must be in [0, 1]"));
        }
    }
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(CFLD_MAGIC)?;
    let alpha_token = alpha_true.map_or_else(|| "-1".to_string(), |a| format!("{a}"));
    writeln!(f, "{rows} {cols} {} {sigma_z} {alpha_token} {seed}", looks.len())?;
    for look in looks {
        for v in look.values().iter() {
            f.write_all(&v.re.to_le_bytes())?;
            f.write_all(&v.im.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn read_cfld(path: &Path) -> Result<CfldData> {
    let mut f = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 6];
    f.read_exact(&mut magic)
        .map_err(|_| Error::Format("cfld: truncated magic".into()))?;
    if magic != CFLD_MAGIC {
        return Err(Error::Format("cfld: bad magic".into()));
    }
    let header = read_line(&mut f)?;
    let tokens: Vec<&str> = header.split(' ').collect();
    if tokens.len() != 6 || tokens.iter().any(|t| t.is_empty()) {
        return Err(Error::Format(format!(
            "cfld: header must be six space-separated fields, got {header:?}"
        )));
    }
    let rows: usize = parse_token(tokens[0], "rows")?;
    let cols: usize = parse_token(tokens[1], "cols")?;
    let looks_count: usize = parse_token(tokens[2], "looks")?;
    let sigma_z: f64 = parse_token(tokens[3], "sigma_z")?;
    let alpha_true = if tokens[4] == "-1" {
        None
    } else {
        let a: f64 = parse_token(tokens[4], "alpha")?;
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::Format(format!("cfld: alpha {a} outside [0, 1]")));
        }
        Some(a)
    };
    let seed: u64 = parse_token(tokens[5], "seed")?;
    if rows == 0 || cols == 0 || looks_count == 0 {
        return Err(Error::Format("cfld: zero dimension".into()));
    }
    if !(sigma_z > 0.0) || !sigma_z.is_finite() {
        return Err(Error::Format(format!("cfld: bad sigma_z {sigma_z}")));
    }

    let mut looks = Vec::with_capacity(looks_count);
    let mut buf = vec![0u8; rows * cols * 16];
    for _ in 0..looks_count {
        f.read_exact(&mut buf)
            .map_err(|_| Error::Format("cfld: truncated payload".into()))?;
        let mut values = Array2::<Complex64>::zeros((rows, cols));
        for (idx, v) in values.iter_mut().enumerate() {
            let off = idx * 16;
            let re = f64::from_le_bytes(buf[off..off + 8].try_into().expect("8 bytes"));
            let im = f64::from_le_bytes(buf[off + 8..off + 16].try_into().expect("8 bytes"));
            *v = Complex64::new(re, im);
        }
        looks.push(ComplexField::new(values)?);
    }
    let mut trailing = [0u8; 1];
    if f.read(&mut trailing)? != 0 {
        return Err(Error::Format("cfld: trailing bytes after payload".into()));
    }
    Ok(CfldData {
        looks,
        sigma_z,
        alpha_true,
        seed,
    })
}

fn read_line(f: &mut impl Read) -> Result<String> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        f.read_exact(&mut byte)
            .map_err(|_| Error::Format("cfld: truncated header".into()))?;
        if byte[0] == b'\n' {
            break;
        }
        if line.len() > 256 {
            return Err(Error::Format("cfld: header line too long".into()));
        }
        line.push(byte[0]);
    }
    String::from_utf8(line).map_err(|_| Error::Format("cfld: header is not UTF-8".into()))
}

fn parse_token<T: std::str::FromStr>(token: &str, what: &str) -> Result<T> {
    token
        .parse()
        .map_err(|_| Error::Format(format!("cfld: bad {what} field {token:?}")))
}

// --- PGM ---------------------------------------------------------------

/// Writes a binary (P5) PGM with 16-bit samples. Values are taken on the
/// 0..=255 scale and quantized to 0..=65535, preserving precision well
/// beyond 8 bits; out-of-range values are clipped.
pub fn write_pgm16(path: &Path, image: &Array2<f64>) -> Result<()> {
    let (h, w) = image.dim();
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P5\n{w} {h}\n65535\n")?;
    for v in image.iter() {
        let q = (v.clamp(0.0, 255.0) * 257.0).round() as u16;
        f.write_all(&q.to_be_bytes())?;
    }
    f.flush()?;
    Ok(())
}

/// Writes a binary (P5) 8-bit PGM on the 0..=255 scale.
pub fn write_pgm8(path: &Path, image: &Array2<f64>) -> Result<()> {
    let (h, w) = image.dim();
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P5\n{w} {h}\n255\n")?;
    for v in image.iter() {
        f.write_all(&[v.clamp(0.0, 255.0).round() as u8])?;
    }
    f.flush()?;
    Ok(())
}

/// Reads a binary (P5) PGM onto the 0..=255 scale regardless of its
/// declared maxval. Header whitespace and `#` comments are accepted.
pub fn read_pgm(path: &Path) -> Result<Array2<f64>> {
    let mut data = Vec::new();
    File::open(path)?.read_to_end(&mut data)?;
    parse_pgm(&data)
}

fn parse_pgm(data: &[u8]) -> Result<Array2<f64>> {
    if data.len() < 2 || &data[..2] != b"P5" {
        return Err(Error::Format("pgm: not a binary P5 file".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        *field = read_pgm_int(data, &mut pos)?;
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("pgm: bad dimensions {w}x{h}/{maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let need = w * h * bytes_per;
    if data.len() < pos + need {
        return Err(Error::Format("pgm: truncated raster".into()));
    }
    let scale = 255.0 / maxval as f64;
    let mut out = Array2::<f64>::zeros((h, w));
    for (idx, v) in out.iter_mut().enumerate() {
        let off = pos + idx * bytes_per;
        let raw = if bytes_per == 2 {
            u16::from_be_bytes([data[off], data[off + 1]]) as f64
        } else {
            data[off] as f64
        };
        *v = raw * scale;
    }
    Ok(out)
}

fn read_pgm_int(data: &[u8], pos: &mut usize) -> Result<usize> {
    // Skip whitespace and comments.
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < data.len() && data[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("pgm: expected integer in header".into()));
    }
    std::str::from_utf8(&data[start..*pos])
        .expect("digits are UTF-8")
        .parse()
        .map_err(|_| Error::Format("pgm: integer overflow in header".into()))
}

/// Loads a grayscale image (PGM via the native parser, PNG and friends
/// via the `image` crate) onto the 0..=255 scale.
pub fn load_gray(path: &Path) -> Result<Array2<f64>> {
    let mut magic = [0u8; 2];
    File::open(path)?.read_exact(&mut magic).ok();
    if &magic == b"P5" {
        return read_pgm(path);
    }
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("image decode failed: {e}")))?
        .into_luma16();
    let (w, h) = img.dimensions();
    let mut out = Array2::<f64>::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = p.0[0] as f64 / 257.0;
    }
    Ok(out)
}

// --- Run configuration --------------------------------------------------

/// Flat `key=value` configuration file mirroring the CLI flags. Blank
/// lines and `#` comments are ignored; unknown keys are errors at the
/// command that consumes the file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunConfig {
    entries: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Format(format!(
                    "config line {}: expected key=value, got {raw:?}",
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Format(format!("config line {}: empty key", lineno + 1)));
            }
            if entries.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Format(format!(
                    "config line {}: duplicate key {key:?}",
                    lineno + 1
                )));
            }
        }
        Ok(Self { entries })
    }

    /// Errors on any key outside `allowed` — typos never pass silently.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        for key in self.entries.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(Error::invalid(format!(
                    "unknown config key {key:?}; allowed: {}",
                    allowed.join(", ")
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use tempfile::tempdir;

    fn random_looks(h: usize, w: usize, count: usize, seed: u64) -> Vec<ComplexField> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                ComplexField::new(Array2::from_shape_fn((h, w), |_| {
                    Complex64::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0))
                }))
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn cfld_round_trip_is_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.cfld");
        let looks = random_looks(5, 7, 3, 1);
        write_cfld(&path, &looks, 15.0, Some(0.4375), 123456789).unwrap();
        let data = read_cfld(&path).unwrap();
        assert_eq!(data.looks, looks);
        assert_eq!(data.sigma_z, 15.0);
        assert_eq!(data.alpha_true, Some(0.4375));
        assert_eq!(data.seed, 123456789);

        // Writing the parsed data again reproduces the file byte for byte.
        let path2 = dir.path().join("m2.cfld");
        write_cfld(&path2, &data.looks, data.sigma_z, data.alpha_true, data.seed).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn cfld_alpha_sentinel_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.cfld");
        let looks = random_looks(3, 3, 1, 2);
        write_cfld(&path, &looks, 0.25, None, 7).unwrap();
        let data = read_cfld(&path).unwrap();
        assert_eq!(data.alpha_true, None);
    }

    #[test]
    fn cfld_rejects_corruption() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.cfld");
        let looks = random_looks(4, 4, 2, 3);
        write_cfld(&path, &looks, 1.0, Some(0.5), 1).unwrap();
        let good = std::fs::read(&path).unwrap();

        // Bad magic.
        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_cfld(&path), Err(Error::Format(_))));

        // Truncated payload.
        std::fs::write(&path, &good[..good.len() - 8]).unwrap();
        assert!(matches!(read_cfld(&path), Err(Error::Format(_))));

        // Trailing bytes.
        let mut long = good.clone();
        long.push(0);
        std::fs::write(&path, &long).unwrap();
        assert!(matches!(read_cfld(&path), Err(Error::Format(_))));

        // Double space in header.
        let mut spaced = good;
        let insert_at = CFLD_MAGIC.len() + 1;
        spaced.insert(insert_at, b' ');
        std::fs::write(&path, &spaced).unwrap();
        assert!(matches!(read_cfld(&path), Err(Error::Format(_))));
    }

    #[test]
    fn pgm16_round_trip_preserves_values_beyond_8_bits() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("im.pgm");
        let img = Array2::from_shape_fn((9, 6), |(i, j)| (i as f64 * 6.0 + j as f64) * 4.7);
        write_pgm16(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        for (a, b) in back.iter().zip(img.iter()) {
            assert!((a - b).abs() <= 0.51 / 257.0, "{a} vs {b}");
        }
    }

    #[test]
    fn pgm8_reads_back_rounded() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("im8.pgm");
        let img = Array2::from_shape_fn((4, 5), |(i, j)| (i + j) as f64 * 30.0);
        write_pgm8(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        for (a, b) in back.iter().zip(img.iter()) {
            assert!((a - b).abs() <= 0.5);
        }
    }

    #[test]
    fn pgm_header_comments_are_accepted() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        let mut bytes = b"P5\n# comment line\n3 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 128, 255, 1, 2, 3]);
        std::fs::write(&path, &bytes).unwrap();
        let img = read_pgm(&path).unwrap();
        assert_eq!(img.dim(), (2, 3));
        assert_eq!(img[[0, 1]], 128.0);
    }

    #[test]
    fn load_gray_handles_png() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("g.png");
        let img = image::GrayImage::from_fn(6, 4, |x, y| image::Luma([(x * 40 + y) as u8]));
        img.save(&path).unwrap();
        let loaded = load_gray(&path).unwrap();
        assert_eq!(loaded.dim(), (4, 6));
        assert!((loaded[[1, 2]] - 81.0).abs() < 0.5);
    }

    #[test]
    fn run_config_parses_and_rejects_unknown_keys() {
        let cfg = RunConfig::parse("# comment\nsigma-z = 15\nlooks=4\n\n").unwrap();
        assert_eq!(cfg.get("sigma-z"), Some("15"));
        assert_eq!(cfg.get("looks"), Some("4"));
        assert!(cfg.check_keys(&["sigma-z", "looks", "alpha"]).is_ok());
        assert!(cfg.check_keys(&["sigma-z"]).is_err());
        assert!(RunConfig::parse("not a pair").is_err());
        assert!(RunConfig::parse("a=1\na=2").is_err());
    }
}
