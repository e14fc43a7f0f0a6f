use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::augment::resize;
use super::{Image, Item, LabeledImageSet};
use crate::error::{Error, Result};

fn path_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Path {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| path_err(dir, e.to_string()))? {
        out.push(entry?.path());
    }
    out.sort();
    Ok(out)
}

/// Loads `root/<class>/<image>` into a set. Classes are numbered by sorted
/// directory name and every image is resized to `target_size`. Files that
/// fail to decode are skipped with a warning.
pub fn load_image_folder(root: &Path, target_size: (usize, usize)) -> Result<LabeledImageSet> {
    if !root.is_dir() {
        return Err(path_err(root, "dataset root does not exist or is not a directory"));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Structure(format!(
            "{} contains no class directories",
            root.display()
        )));
    }
    let mut items = Vec::new();
    let mut names = Vec::with_capacity(class_dirs.len());
    for (class_id, dir) in class_dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let before = items.len();
        for file in sorted_entries(dir)?.into_iter().filter(|p| p.is_file()) {
            let decoded = match image::open(&file) {
                Ok(img) => img.to_rgb32f(),
                Err(e) => {
                    log::warn!("skipping {}: {e}", file.display());
                    continue;
                }
            };
            let (w, h) = decoded.dimensions();
            let img = Image::new(h as usize, w as usize, 3, decoded.into_raw())?;
            let img = resize(&img, target_size);
            let stem = file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            items.push(Item {
                id: format!("{name}/{stem}"),
                class_id,
                image: Arc::new(img),
            });
        }
        if items.len() == before {
            return Err(Error::Structure(format!(
                "class directory {} has no decodable images",
                dir.display()
            )));
        }
        names.push(name);
    }
    LabeledImageSet::new(items, names)
}

/// Writes the set as `root/<class>/<index>.png` with 8-bit RGB pixels.
pub fn write_image_folder(set: &LabeledImageSet, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| path_err(root, e.to_string()))?;
    for (c, name) in set.class_names().iter().enumerate() {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| path_err(&dir, e.to_string()))?;
        for (j, &i) in set.class_items(c).iter().enumerate() {
            let img = &set.items()[i].image;
            let bytes: Vec<u8> = img
                .data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
                .ok_or_else(|| Error::Structure("image buffer size mismatch".into()))?;
            buf.save(dir.join(format!("{j:05}.png")))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::tests::toy_set;

    #[test]
    fn round_trip_counts_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let set = toy_set(2, 3);
        write_image_folder(&set, dir.path()).unwrap();
        let a = load_image_folder(dir.path(), (4, 4)).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a.num_classes(), 2);
        let b = load_image_folder(dir.path(), (4, 4)).unwrap();
        for (x, y) in a.items().iter().zip(b.items()) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.image, y.image);
        }
        // 8-bit quantisation is the only loss
        for (x, y) in a.items().iter().zip(set.items()) {
            for (p, q) in x.image.data.iter().zip(&y.image.data) {
                assert!((p - q).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }

    #[test]
    fn resizes_on_load() {
        let dir = tempfile::tempdir().unwrap();
        write_image_folder(&toy_set(1, 1), dir.path()).unwrap();
        let s = load_image_folder(dir.path(), (9, 7)).unwrap();
        assert_eq!(s.image_size(), (9, 7));
    }

    #[test]
    fn empty_root_is_structure_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_image_folder(dir.path(), (4, 4)), Err(Error::Structure(_))));
    }

    #[test]
    fn missing_root_is_path_error() {
        let dir = tempfile::tempdir().unwrap();
        let r = load_image_folder(&dir.path().join("nope"), (4, 4));
        assert!(matches!(r, Err(Error::Path { .. })));
    }

    #[test]
    fn undecodable_files_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        write_image_folder(&toy_set(2, 2), dir.path()).unwrap();
        fs::write(dir.path().join("class0/junk.png"), b"not an image").unwrap();
        let s = load_image_folder(dir.path(), (4, 4)).unwrap();
        assert_eq!(s.len(), 4);

        fs::create_dir(dir.path().join("class2")).unwrap();
        fs::write(dir.path().join("class2/bad.png"), b"???").unwrap();
        assert!(matches!(load_image_folder(dir.path(), (4, 4)), Err(Error::Structure(_))));
    }
}
