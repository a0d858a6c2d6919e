//! On-disk dataset layout:
//!
//! ```text
//! root/images/<class_name>/<stem>.png
//! root/masks/<class_name>/<stem>.png    (optional, 8-bit grayscale, >= 128 is object)
//! ```
//!
//! Class indices follow the sorted class-folder names. Image ids are
//! `<class_name>/<stem>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, ImageReader, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;

use super::{ImageDataset, ImagingError, LabeledImage, Split};
use crate::rng;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ImagingError + '_ {
    move |source| ImagingError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>, ImagingError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if want_dirs && path.is_dir() {
            out.push(path);
        } else if !want_dirs
            && path.is_file()
            && path
                .extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn decode(path: &Path, id: &str) -> Result<image::DynamicImage, ImagingError> {
    let unreadable = |reason: String| ImagingError::UnreadableImage {
        id: id.to_string(),
        reason,
    };
    ImageReader::open(path)
        .map_err(|e| unreadable(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| unreadable(e.to_string()))?
        .decode()
        .map_err(|e| unreadable(e.to_string()))
}

fn rgb_to_array(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    })
}

/// Load a dataset, resizing images bilinearly (masks nearest-neighbour) to
/// `size x size`.
pub fn load_image_dataset(root: impl AsRef<Path>, size: usize) -> Result<ImageDataset, ImagingError> {
    let root = root.as_ref();
    let image_root = root.join("images");
    let class_dirs = sorted_entries(&image_root, true)?;
    if class_dirs.is_empty() {
        return Err(ImagingError::NoClasses(image_root));
    }
    let side = size as u32;
    let mut class_names = Vec::new();
    let mut images = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let class = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let files = sorted_entries(dir, false)?;
        if files.is_empty() {
            return Err(ImagingError::EmptyClass(dir.clone()));
        }
        for file in files {
            let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let id = format!("{class}/{stem}");
            let raw = decode(&file, &id)?;
            let (w0, h0) = (raw.width(), raw.height());
            let rgb = image::imageops::resize(&raw.to_rgb8(), side, side, FilterType::Triangle);
            let mask_path = root.join("masks").join(&class).join(format!("{stem}.png"));
            let human_mask = if mask_path.is_file() {
                let m = decode(&mask_path, &id)?.to_luma8();
                if m.dimensions() != (w0, h0) {
                    return Err(ImagingError::MaskShapeMismatch {
                        id,
                        mask: m.dimensions(),
                        image: (w0, h0),
                    });
                }
                let m = image::imageops::resize(&m, side, side, FilterType::Nearest);
                Some(Array2::from_shape_fn((size, size), |(y, x)| {
                    u8::from(m.get_pixel(x as u32, y as u32)[0] >= 128)
                }))
            } else {
                None
            };
            images.push(LabeledImage {
                id,
                pixels: rgb_to_array(&rgb),
                label,
                human_mask,
                view: None,
            });
        }
        class_names.push(class);
    }
    let ds = ImageDataset {
        images,
        class_names,
        split: Split::All,
    };
    ds.validate()?;
    Ok(ds)
}

/// Write images (and masks, when present) in the layout read by
/// [`load_image_dataset`].
pub fn save_image_dataset(ds: &ImageDataset, root: impl AsRef<Path>) -> Result<(), ImagingError> {
    let root = root.as_ref();
    for class in &ds.class_names {
        let dir = root.join("images").join(class);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    for im in &ds.images {
        let class = &ds.class_names[im.label];
        let stem = im.id.rsplit('/').next().unwrap_or(&im.id);
        let (h, w) = (im.height() as u32, im.width() as u32);
        let rgb = RgbImage::from_fn(w, h, |x, y| {
            let px = |c| (im.pixels[[c, y as usize, x as usize]] * 255.0).round() as u8;
            Rgb([px(0), px(1), px(2)])
        });
        let path = root.join("images").join(class).join(format!("{stem}.png"));
        rgb.save(&path).map_err(|e| ImagingError::UnreadableImage {
            id: im.id.clone(),
            reason: e.to_string(),
        })?;
        if let Some(mask) = &im.human_mask {
            let dir = root.join("masks").join(class);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            write_mask_png(mask, &dir.join(format!("{stem}.png")))?;
        }
    }
    Ok(())
}

/// Save a binary mask as an 8-bit PNG with values 0 and 255.
pub fn write_mask_png(mask: &Array2<u8>, path: &Path) -> Result<(), ImagingError> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] > 0 { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| ImagingError::UnreadableImage {
        id: path.display().to_string(),
        reason: e.to_string(),
    })
}

#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: ImageDataset,
    pub val: ImageDataset,
    pub test: ImageDataset,
}

/// Seeded stratified split with the given train/validation fractions; the
/// remainder goes to test. Every class keeps at least one validation image
/// when it has two or more images.
pub fn split_stratified(
    ds: &ImageDataset,
    train_fraction: f64,
    val_fraction: f64,
    seed: u64,
) -> DatasetSplits {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, im) in ds.images.iter().enumerate() {
        by_class.entry(im.label).or_default().push(i);
    }
    let mut r = rng::seeded(rng::derive_seed(seed, "split"));
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for idx in by_class.values_mut() {
        idx.shuffle(&mut r);
        let n = idx.len();
        let mut n_val = ((n as f64) * val_fraction).round() as usize;
        if n >= 2 {
            n_val = n_val.max(1);
        }
        let n_train = (((n as f64) * train_fraction).round() as usize).min(n - n_val);
        train.extend_from_slice(&idx[..n_train]);
        val.extend_from_slice(&idx[n_train..n_train + n_val]);
        test.extend_from_slice(&idx[n_train + n_val..]);
    }
    let take = |mut idx: Vec<usize>, split| {
        idx.sort_unstable();
        ImageDataset {
            images: idx.into_iter().map(|i| ds.images[i].clone()).collect(),
            class_names: ds.class_names.clone(),
            split,
        }
    };
    DatasetSplits {
        train: take(train, Split::Train),
        val: take(val, Split::Val),
        test: take(test, Split::Test),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::generate_blob_dataset;

    #[test]
    fn save_then_load_preserves_labels_and_masks() {
        let ds = generate_blob_dataset(3, 4, 20, 5);
        let dir = tempfile::tempdir().unwrap();
        save_image_dataset(&ds, dir.path()).unwrap();
        let loaded = load_image_dataset(dir.path(), 20).unwrap();
        assert_eq!(loaded.len(), 12);
        assert_eq!(loaded.class_names, ds.class_names);
        for (a, b) in ds.images.iter().zip(&loaded.images) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.label, b.label);
            assert_eq!(a.human_mask, b.human_mask);
            let err = (&a.pixels - &b.pixels).mapv(f64::abs).fold(0.0f64, |m, v| m.max(*v));
            assert!(err <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn resize_keeps_range_and_binarizes_masks() {
        let ds = generate_blob_dataset(2, 2, 30, 1);
        let dir = tempfile::tempdir().unwrap();
        save_image_dataset(&ds, dir.path()).unwrap();
        let loaded = load_image_dataset(dir.path(), 17).unwrap();
        for im in &loaded.images {
            assert_eq!(im.pixels.dim(), (3, 17, 17));
            assert!(im.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
            let m = im.human_mask.as_ref().unwrap();
            assert!(m.iter().all(|v| *v <= 1));
            assert!(m.iter().any(|v| *v == 1));
        }
    }

    #[test]
    fn empty_class_and_mask_mismatch() {
        let ds = generate_blob_dataset(2, 1, 16, 1);
        let dir = tempfile::tempdir().unwrap();
        save_image_dataset(&ds, dir.path()).unwrap();
        let bad_mask = Array2::zeros((8, 8));
        write_mask_png(&bad_mask, &dir.path().join("masks/class0/blob0000.png")).unwrap();
        assert!(matches!(
            load_image_dataset(dir.path(), 16),
            Err(ImagingError::MaskShapeMismatch { .. })
        ));
        fs::create_dir_all(dir.path().join("images/aaa_empty")).unwrap();
        assert!(matches!(
            load_image_dataset(dir.path(), 16),
            Err(ImagingError::EmptyClass(_))
        ));
    }

    #[test]
    fn unreadable_image_reports_id() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("images/a")).unwrap();
        fs::write(dir.path().join("images/a/x.png"), b"not a png").unwrap();
        match load_image_dataset(dir.path(), 8) {
            Err(ImagingError::UnreadableImage { id, .. }) => assert_eq!(id, "a/x"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn stratified_split_partitions() {
        let ds = generate_blob_dataset(4, 10, 8, 2);
        let s = split_stratified(&ds, 0.8, 0.1, 7);
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 40);
        for k in 0..4 {
            assert_eq!(s.train.class_images(k).count(), 8);
            assert_eq!(s.val.class_images(k).count(), 1);
            assert_eq!(s.test.class_images(k).count(), 1);
        }
        let again = split_stratified(&ds, 0.8, 0.1, 7);
        assert_eq!(s.val.images, again.val.images);
    }
}
