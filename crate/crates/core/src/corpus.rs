//! Corpus manifests, image decoding and train/validation/test splits.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Smallest accepted side length after cropping.
pub const MIN_SIDE: usize = 8;

/// One artwork record from a manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSample {
    pub id: String,
    pub image_path: String,
    pub title: String,
    pub comment: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

/// A manifest plus the directory its image paths are relative to.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub samples: Vec<CorpusSample>,
}

impl Corpus {
    pub fn load(manifest: impl AsRef<Path>) -> Result<Self> {
        let manifest = manifest.as_ref();
        let samples = load_manifest(manifest)?;
        let root = manifest
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok(Self { root, samples })
    }

    pub fn image_path(&self, sample: &CorpusSample) -> PathBuf {
        self.root.join(&sample.image_path)
    }

    pub fn get(&self, id: &str) -> Option<&CorpusSample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

/// Reads a JSON-lines manifest. Blank lines are skipped.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<CorpusSample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<CorpusSample>> {
    let mut seen = HashSet::new();
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sample: CorpusSample = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(sample.id.clone()) {
            return Err(Error::Validation(format!(
                "duplicate sample id {:?} on line {}",
                sample.id,
                i + 1
            )));
        }
        samples.push(sample);
    }
    Ok(samples)
}

pub fn write_manifest(path: impl AsRef<Path>, samples: &[CorpusSample]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s).expect("sample serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// RGB image as a `[3,H,W]` tensor with values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer<T>(Tensor<T>);

impl<T: Scalar> ImageBuffer<T> {
    /// Wraps a `[3,H,W]` tensor, clamping values into `[0,1]`.
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        let (c, _, _) = tensor.dims3()?;
        if c != 3 {
            return Err(Error::Dimension(format!("image needs 3 channels, got {c}")));
        }
        Ok(Self(tensor.clamp(T::zero(), T::one())))
    }

    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "{}x{} RGB image needs {} bytes, got {}",
                width,
                height,
                width * height * 3,
                rgb.len()
            )));
        }
        let plane = width * height;
        let mut data = vec![T::zero(); 3 * plane];
        let scale = T::lit(255.0);
        for (p, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + p] = T::lit(px[c] as f64) / scale;
            }
        }
        Self::new(Tensor::new(vec![3, height, width], data)?)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    /// Interleaved 8-bit RGB, rounding to nearest.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let plane = h * w;
        let d = self.0.data();
        let mut out = Vec::with_capacity(3 * plane);
        for p in 0..plane {
            for c in 0..3 {
                let v = (d[c * plane + p].as_f64() * 255.0).round().clamp(0.0, 255.0);
                out.push(v as u8);
            }
        }
        out
    }

    pub fn to_png_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let encoder = image::codecs::png::PngEncoder::new(&mut out);
        image::ImageEncoder::write_image(
            encoder,
            &self.to_rgb8(),
            self.width() as u32,
            self.height() as u32,
            image::ExtendedColorType::Rgb8,
        )
        .expect("in-memory PNG encoding");
        out
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width(), self.height()).into_bytes();
        out.extend(self.to_rgb8());
        out
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_png_bytes())
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_ppm_bytes())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Decodes a PNG or binary PPM file and applies [`preprocess`].
pub fn load_image<T: Scalar>(path: impl AsRef<Path>, max_side: usize) -> Result<ImageBuffer<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, max_side).map_err(|e| match e {
        Error::Decode { message, .. } => Error::Decode {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

/// Decodes in-memory PNG or binary PPM bytes and applies [`preprocess`].
pub fn decode_image<T: Scalar>(bytes: &[u8], max_side: usize) -> Result<ImageBuffer<T>> {
    let decode_err = |message: String| Error::Decode {
        path: PathBuf::from("<memory>"),
        message,
    };
    let format = match bytes {
        [0x89, b'P', b'N', b'G', ..] => image::ImageFormat::Png,
        [b'P', b'6', ..] => image::ImageFormat::Pnm,
        _ => return Err(decode_err("unsupported format (expected PNG or P6 PPM)".into())),
    };
    let decoded = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| decode_err(e.to_string()))?
        .to_rgb8();
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let raw = ImageBuffer::from_rgb8(w, h, decoded.as_raw())?;
    preprocess(&raw, max_side)
}

/// Downscales so the longer side is at most `max_side` (bilinear, aspect
/// preserved), then center-crops both sides to a multiple of 8.
pub fn preprocess<T: Scalar>(image: &ImageBuffer<T>, max_side: usize) -> Result<ImageBuffer<T>> {
    let (h, w) = (image.height(), image.width());
    let longest = h.max(w);
    let scaled = if longest > max_side {
        let ratio = max_side as f64 / longest as f64;
        let nh = ((h as f64 * ratio).round() as usize).max(1);
        let nw = ((w as f64 * ratio).round() as usize).max(1);
        resize_bilinear(image, nh, nw)?
    } else {
        image.clone()
    };
    center_crop_to_multiple(&scaled, 8)
}

fn center_crop_to_multiple<T: Scalar>(image: &ImageBuffer<T>, k: usize) -> Result<ImageBuffer<T>> {
    let (h, w) = (image.height(), image.width());
    let (ch, cw) = (h / k * k, w / k * k);
    if ch < MIN_SIDE || cw < MIN_SIDE {
        return Err(Error::Validation(format!(
            "image {w}x{h} is too small: both sides must be at least {MIN_SIDE} after cropping"
        )));
    }
    if (ch, cw) == (h, w) {
        return Ok(image.clone());
    }
    let (y0, x0) = ((h - ch) / 2, (w - cw) / 2);
    let src = image.tensor().data();
    let mut data = Vec::with_capacity(3 * ch * cw);
    for c in 0..3 {
        for y in 0..ch {
            let row = c * h * w + (y0 + y) * w + x0;
            data.extend_from_slice(&src[row..row + cw]);
        }
    }
    ImageBuffer::new(Tensor::new(vec![3, ch, cw], data)?)
}

/// Bilinear resampling with pixel-center alignment.
pub fn resize_bilinear<T: Scalar>(
    image: &ImageBuffer<T>,
    out_h: usize,
    out_w: usize,
) -> Result<ImageBuffer<T>> {
    let (h, w) = (image.height(), image.width());
    let src = image.tensor().data();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let sample_coord = |o: usize, s: f64, n: usize| {
        let p = ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, T::lit(p - i0 as f64))
    };
    let mut data = Vec::with_capacity(3 * out_h * out_w);
    for c in 0..3 {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for oy in 0..out_h {
            let (y0, y1, fy) = sample_coord(oy, sy, h);
            for ox in 0..out_w {
                let (x0, x1, fx) = sample_coord(ox, sx, w);
                let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                data.push(top * (T::one() - fy) + bottom * fy);
            }
        }
    }
    ImageBuffer::new(Tensor::new(vec![3, out_h, out_w], data)?)
}

/// Train/validation/test partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Split<S> {
    pub train: Vec<S>,
    pub validation: Vec<S>,
    pub test: Vec<S>,
}

pub const DEFAULT_FRACTIONS: (f64, f64, f64) = (0.8, 0.1, 0.1);

/// Seeded shuffle, then floor-sized validation and test partitions with the
/// remainder going to training. Errors when validation or test would be empty.
pub fn split_corpus<S: Clone>(
    samples: &[S],
    seed: u64,
    fractions: (f64, f64, f64),
) -> Result<Split<S>> {
    let (f_train, f_val, f_test) = fractions;
    if [f_train, f_val, f_test].iter().any(|f| !(0.0..=1.0).contains(f))
        || (f_train + f_val + f_test - 1.0).abs() > 1e-9
    {
        return Err(Error::Validation(format!(
            "split fractions {fractions:?} must be in [0,1] and sum to 1"
        )));
    }
    let n = samples.len();
    if n < 3 {
        return Err(Error::Validation(format!(
            "need at least 3 samples to split, got {n}"
        )));
    }
    let n_val = (n as f64 * f_val).floor() as usize;
    let n_test = (n as f64 * f_test).floor() as usize;
    if n_val == 0 || n_test == 0 {
        return Err(Error::Validation(format!(
            "{n} samples leave an empty partition (validation {n_val}, test {n_test})"
        )));
    }
    let n_train = n - n_val - n_test;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    Ok(Split {
        train: pick(&order[..n_train]),
        validation: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ppm(w: usize, h: usize, px: impl Fn(usize, usize) -> [u8; 3]) -> Vec<u8> {
        let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
        for y in 0..h {
            for x in 0..w {
                out.extend(px(x, y));
            }
        }
        out
    }

    #[test]
    fn manifest_parsing() {
        let p = Path::new("m.jsonl");
        assert!(parse_manifest("", p).unwrap().is_empty());

        let three = r#"{"id":"a","image_path":"a.ppm","title":"A","comment":"x","attributes":{"k":"v"}}
{"id":"b","image_path":"b.ppm","title":"","comment":""}
{"id":"c","image_path":"c.ppm","title":"C","comment":"z","attributes":{}}
"#;
        let s = parse_manifest(three, p).unwrap();
        assert_eq!(s.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
        assert_eq!(s[0].attributes["k"], "v");

        let missing = "{\"id\":\"a\",\"image_path\":\"a.ppm\",\"title\":\"t\",\"comment\":\"c\"}\n{\"id\":\"b\",\"image_path\":\"b.ppm\",\"title\":\"t\"}\n";
        match parse_manifest(missing, p) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("comment"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }

        let dup = "{\"id\":\"a\",\"image_path\":\"a\",\"title\":\"\",\"comment\":\"\"}\n".repeat(2);
        assert!(matches!(parse_manifest(&dup, p), Err(Error::Validation(_))));
    }

    #[test]
    fn tiny_image_rejected() {
        let bytes = ppm(2, 2, |_, _| [255, 255, 255]);
        assert!(matches!(
            decode_image::<f64>(&bytes, 512),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn red_image_channels() {
        let img = decode_image::<f64>(&ppm(8, 8, |_, _| [255, 0, 0]), 512).unwrap();
        assert_eq!(img.tensor().shape(), &[3, 8, 8]);
        let d = img.tensor().data();
        assert!(d[..64].iter().all(|&v| v == 1.0));
        assert!(d[64..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scale_then_crop() {
        // 100 wide, 60 tall -> 50x30 -> cropped to 48x24.
        let img = decode_image::<f64>(&ppm(100, 60, |x, y| [(x * 2) as u8, (y * 4) as u8, 9]), 50)
            .unwrap();
        assert_eq!((img.width(), img.height()), (48, 24));
    }

    #[test]
    fn garbage_and_truncated_rejected() {
        assert!(matches!(
            decode_image::<f64>(b"GIF89a....", 64),
            Err(Error::Decode { .. })
        ));
        let mut bytes = ppm(8, 8, |_, _| [1, 2, 3]);
        bytes.truncate(40);
        assert!(matches!(decode_image::<f64>(&bytes, 64), Err(Error::Decode { .. })));
    }

    #[test]
    fn ppm_and_png_round_trip() {
        let bytes = ppm(16, 8, |x, y| [(x * 13) as u8, (y * 29) as u8, ((x + y) * 7) as u8]);
        let img = decode_image::<f64>(&bytes, 512).unwrap();
        for encoded in [img.to_ppm_bytes(), img.to_png_bytes()] {
            let back = decode_image::<f64>(&encoded, 512).unwrap();
            for (a, b) in img.tensor().data().iter().zip(back.tensor().data()) {
                assert!((a - b).abs() <= 1.0 / 255.0);
            }
        }
    }

    #[test]
    fn split_sizes_and_errors() {
        let items: Vec<u32> = (0..10).collect();
        let s = split_corpus(&items, 7, DEFAULT_FRACTIONS).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (8, 1, 1));
        assert_eq!(s, split_corpus(&items, 7, DEFAULT_FRACTIONS).unwrap());

        let seven: Vec<u32> = (0..7).collect();
        assert!(matches!(
            split_corpus(&seven, 1, DEFAULT_FRACTIONS),
            Err(Error::Validation(_))
        ));
        assert!(split_corpus(&items[..2], 1, (0.0, 0.5, 0.5)).is_err());
        assert!(split_corpus(&items, 1, (0.5, 0.5, 0.5)).is_err());
    }
}
