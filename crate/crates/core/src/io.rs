//! PNG image/mask files, dataset directories and atomic writes.

use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use crate::data::{ByteImage, LabelMask};
use crate::error::{Error, Result};

/// Expected side length of dataset images unless any size is allowed.
pub const IMAGE_SIZE: usize = 256;

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::file(path, "not a file path"))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::file(path, e.to_string())
    })
}

struct Decoded {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

fn decode_png(path: &Path) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| Error::file(path, e.to_string()))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::file(path, format!("invalid PNG: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::file(path, "PNG too large"))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::file(path, format!("invalid PNG: {e}")))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::file(path, format!("expected 8-bit samples, got {:?}", info.bit_depth)));
    }
    buf.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        channels: info.color_type.samples(),
        data: buf,
    })
}

fn encode_png(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| Error::Data(format!("PNG encode: {e}")))?;
        w.write_image_data(data)
            .map_err(|e| Error::Data(format!("PNG encode: {e}")))?;
        w.finish().map_err(|e| Error::Data(format!("PNG encode: {e}")))?;
    }
    Ok(out)
}

fn check_size(path: &Path, w: usize, h: usize, allow_any_size: bool) -> Result<()> {
    if !allow_any_size && (w != IMAGE_SIZE || h != IMAGE_SIZE) {
        return Err(Error::file(
            path,
            format!("expected {IMAGE_SIZE}x{IMAGE_SIZE}, got {w}x{h} (use --allow-any-size)"),
        ));
    }
    Ok(())
}

/// Reads an 8-bit RGB PNG.
pub fn read_image(path: &Path, allow_any_size: bool) -> Result<ByteImage> {
    let d = decode_png(path)?;
    if d.channels != 3 {
        return Err(Error::file(path, format!("expected 3 channels, got {}", d.channels)));
    }
    check_size(path, d.width, d.height, allow_any_size)?;
    let n = d.width * d.height;
    let mut planar = vec![0u8; 3 * n];
    for (i, px) in d.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            planar[c * n + i] = px[c];
        }
    }
    ByteImage::new(d.width, d.height, planar)
}

/// Reads an 8-bit single-channel PNG of labels in `{0, 1, 2}`.
pub fn read_mask(path: &Path, allow_any_size: bool) -> Result<LabelMask> {
    let d = decode_png(path)?;
    if d.channels != 1 {
        return Err(Error::file(path, format!("expected 1 channel, got {}", d.channels)));
    }
    check_size(path, d.width, d.height, allow_any_size)?;
    LabelMask::new(d.width, d.height, d.data).map_err(|e| Error::file(path, e.to_string()))
}

pub fn write_image(path: &Path, img: &ByteImage) -> Result<()> {
    let n = img.width * img.height;
    let mut inter = vec![0u8; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            inter[3 * i + c] = img.data[c * n + i];
        }
    }
    write_atomic(path, &encode_png(img.width, img.height, png::ColorType::Rgb, &inter)?)
}

pub fn write_mask(path: &Path, mask: &LabelMask) -> Result<()> {
    write_atomic(
        path,
        &encode_png(mask.width, mask.height, png::ColorType::Grayscale, &mask.data)?,
    )
}

/// Loads an image and its mask and checks that their sizes agree.
pub fn load_pair(image: &Path, mask: &Path, allow_any_size: bool) -> Result<(ByteImage, LabelMask)> {
    let img = read_image(image, allow_any_size)?;
    let m = read_mask(mask, allow_any_size)?;
    if (img.width, img.height) != (m.width, m.height) {
        return Err(Error::file(
            mask,
            format!(
                "mask is {}x{} but image {} is {}x{}",
                m.width,
                m.height,
                image.display(),
                img.width,
                img.height
            ),
        ));
    }
    Ok((img, m))
}

/// PNG files in `dir` keyed by file stem, sorted.
pub fn list_pngs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::file(dir, e.to_string()))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::file(dir, e.to_string()))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem() {
                out.push((stem.to_string_lossy().into_owned(), path));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// One `(name, image, mask)` triple per file in `<root>/images`, paired
/// with `<root>/masks` by stem.
pub fn list_pairs(root: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let images = list_pngs(&root.join("images"))?;
    let masks: std::collections::BTreeMap<_, _> = list_pngs(&root.join("masks"))?.into_iter().collect();
    if images.len() != masks.len() {
        return Err(Error::file(
            root,
            format!("{} images but {} masks", images.len(), masks.len()),
        ));
    }
    images
        .into_iter()
        .map(|(name, img)| match masks.get(&name) {
            Some(m) => Ok((name, img, m.clone())),
            None => Err(Error::file(&img, "no mask with the same name")),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn image_roundtrip_and_channel_check() {
        let dir = tempfile::tempdir().unwrap();
        let img = ByteImage::new(4, 2, (0..24).map(|v| v as u8 * 10).collect()).unwrap();
        let p = dir.path().join("a.png");
        write_image(&p, &img).unwrap();
        assert_eq!(read_image(&p, true).unwrap(), img);
        assert!(read_image(&p, false).unwrap_err().to_string().contains("256x256"));
        assert!(read_mask(&p, true).unwrap_err().to_string().contains("1 channel"));
    }

    #[test]
    fn mask_with_bad_label_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let bytes = encode_png(3, 2, png::ColorType::Grayscale, &[0, 1, 2, 0, 3, 0]).unwrap();
        write_atomic(&p, &bytes).unwrap();
        let err = read_mask(&p, true).unwrap_err().to_string();
        assert!(err.contains("m.png") && err.contains("x=1, y=1"), "{err}");
    }

    #[test]
    fn pairs_by_stem() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        fs::create_dir_all(dir.path().join("masks")).unwrap();
        let img = ByteImage::new(2, 2, vec![0; 12]).unwrap();
        for name in ["b", "a"] {
            write_image(&dir.path().join("images").join(format!("{name}.png")), &img).unwrap();
            write_mask(&dir.path().join("masks").join(format!("{name}.png")), &LabelMask::zeros(2, 2)).unwrap();
        }
        let pairs = list_pairs(dir.path()).unwrap();
        assert_eq!(pairs.iter().map(|p| p.0.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        let (_, m) = load_pair(&pairs[0].1, &pairs[0].2, true).unwrap();
        assert_eq!(m, LabelMask::zeros(2, 2));
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn mask_roundtrip(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
            let data = (0..w * h).map(|i| ((seed >> (i % 60)) % 3) as u8).collect();
            let mask = LabelMask::new(w, h, data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("m.png");
            write_mask(&p, &mask).unwrap();
            prop_assert_eq!(read_mask(&p, true).unwrap(), mask);
        }
    }
}
