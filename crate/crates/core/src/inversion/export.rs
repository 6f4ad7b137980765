use std::io::Write;
use std::path::Path;

use super::ImageBatch;
use crate::data::Preprocess;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Writes image `index` of a `[N, C, H, W]` batch of `[0, 1]` pixels as binary
/// PPM. Single-channel images are replicated to gray.
pub fn write_ppm<T: Real>(path: &Path, images: &Tensor<T>, index: usize) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 || !(s[1] == 1 || s[1] == 3) || index >= s[0] {
        return Err(Error::shape("write_ppm", format!("image {index} of {s:?}")));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let img = &images.data()[index * c * h * w..(index + 1) * c * h * w];
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = img[(ch.min(c - 1) * h + y) * w + x].to_f64().unwrap();
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Writes `img_NNNNN.ppm` files and a `manifest.txt` (index, target, teacher
/// top-1, confidence) into `dir`.
pub fn export_ppm<T: Real>(dir: &Path, batch: &ImageBatch<T>, pre: &Preprocess) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut pixels = batch.pixels.clone();
    pre.invert(&mut pixels)?;
    let mut manifest = String::from("index target teacher_top1 confidence\n");
    for i in 0..batch.len() {
        write_ppm(&dir.join(format!("img_{i:05}.ppm")), &pixels, i)?;
        manifest.push_str(&format!(
            "{i} {} {} {:.6}\n",
            batch.targets[i], batch.teacher_top1[i], batch.confidence[i]
        ));
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::<f32>::from_vec(&[1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let p = dir.path().join("a.ppm");
        write_ppm(&p, &t, 0).unwrap();
        let bytes = std::fs::read(p).unwrap();
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(&bytes[11..], &[0, 0, 0, 255, 255, 255]);
        assert!(write_ppm(&dir.path().join("b.ppm"), &t, 1).is_err());
    }
}
