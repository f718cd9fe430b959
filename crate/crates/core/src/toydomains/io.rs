use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::tensor::Array;
use crate::{Error, Result};

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Writes a `[3, H, W]` image with values in `[0, 1]` as 8-bit RGB PNG.
pub fn save_png(img: &Array<f32>, path: &Path) -> Result<()> {
    let [c, h, w] = img.shape() else {
        return Err(Error::InvalidInput(format!("expected [3, H, W], got {:?}", img.shape())));
    };
    if *c != 3 {
        return Err(Error::InvalidInput(format!("expected 3 channels, got {c}")));
    }
    let (h, w) = (*h, *w);
    let d = img.data();
    let mut buf = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for ch in 0..3 {
            buf.push((d[ch * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let out = RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized to the image");
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    out.save_with_format(path, ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => image_err(path, other),
    })
}

/// Reads an image file as `[3, H, W]` in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Array<f32>> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => image_err(path, other),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (p, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * h * w + p] = f32::from(px.0[ch]) / 255.0;
        }
    }
    Ok(Array::new(&[3, h, w], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let d = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..3 * 5 * 7).map(|i| ((i * 37) % 256) as f32 / 255.0).collect();
        let img = Array::new(&[3, 5, 7], data).unwrap();
        let p = d.path().join("x/y.png");
        save_png(&img, &p).unwrap();
        assert_eq!(load_image(&p).unwrap(), img);
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let e = load_image(Path::new("/nonexistent/none.png")).unwrap_err();
        assert_eq!(e.exit_code(), 3);
    }
}
