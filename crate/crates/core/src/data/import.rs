use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, LabeledImage, Split};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Loads a directory-per-class tree of binary PPM (P6) images. Class ids
/// follow the sorted directory names; files within a class are sorted by
/// name. Non-`.ppm` files are ignored.
pub fn import_folder(root: &Path) -> Result<Dataset> {
    let mut class_dirs: Vec<_> = fs::read_dir(root)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!(
            "no class directories under {}",
            root.display()
        )));
    }
    let mut images = Vec::new();
    let mut class_names = Vec::new();
    for (class_id, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<_> = fs::read_dir(dir)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
            .collect();
        files.sort();
        for file in files {
            images.push(LabeledImage {
                pixels: read_ppm(&file)?,
                class_id,
            });
        }
        class_names.push(
            dir.file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned(),
        );
    }
    Ok(Dataset {
        images,
        num_classes: class_names.len(),
        class_names,
    })
}

fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    if !bytes.starts_with(b"P6") {
        return Err(Error::Image(format!(
            "{}: not a binary PPM (P6)",
            path.display()
        )));
    }
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .into_raw()
        .into_iter()
        .map(|b| f64::from(b) / 255.0)
        .collect();
    Ok(Tensor::new([h as usize, w as usize, 3], data)?)
}

/// Summary written next to a run: class names, per-class counts and the
/// split assignment of every sample id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub counts: BTreeMap<String, usize>,
    pub split: Split,
}

impl DatasetManifest {
    pub fn new(data: &Dataset, split: &Split) -> Self {
        let counts = data
            .ids_by_class()
            .iter()
            .zip(&data.class_names)
            .map(|(ids, name)| (name.clone(), ids.len()))
            .collect();
        Self {
            classes: data.class_names.clone(),
            counts,
            split: split.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_ppm(path: &Path, w: u32, h: u32, fill: u8) {
        let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
        bytes.extend(std::iter::repeat_n(fill, (w * h * 3) as usize));
        fs::write(path, bytes).unwrap();
    }

    #[test]
    fn imports_sorted_class_folders() {
        let dir = tempfile::tempdir().unwrap();
        for (class, fill) in [("b_cat", 255u8), ("a_dog", 0)] {
            let sub = dir.path().join(class);
            fs::create_dir(&sub).unwrap();
            write_ppm(&sub.join("2.ppm"), 3, 2, fill);
            write_ppm(&sub.join("1.ppm"), 3, 2, fill);
            fs::write(sub.join("notes.txt"), "skip").unwrap();
        }
        let d = import_folder(dir.path()).unwrap();
        assert_eq!(d.class_names, vec!["a_dog", "b_cat"]);
        assert_eq!(d.len(), 4);
        assert_eq!(d.images[0].pixels.shape(), &[2, 3, 3]);
        assert!(d.images[0].pixels.data().iter().all(|&v| v == 0.0));
        assert!(d.images[3].pixels.data().iter().all(|&v| v == 1.0));
        assert_eq!(d.labels(), vec![0, 0, 1, 1]);
    }

    #[test]
    fn rejects_ascii_ppm_and_empty_root() {
        let dir = tempfile::tempdir().unwrap();
        assert!(import_folder(dir.path()).is_err());
        let sub = dir.path().join("c");
        fs::create_dir(&sub).unwrap();
        fs::write(sub.join("x.ppm"), "P3\n1 1\n255\n0 0 0\n").unwrap();
        assert!(matches!(import_folder(dir.path()), Err(Error::Image(_))));
    }

    #[test]
    fn manifest_round_trips() {
        let d = super::super::gen_synthetic(4, 5, (4, 4), 0.1, 0).unwrap();
        let s = super::super::split(&d, &Default::default(), 0).unwrap();
        let m = DatasetManifest::new(&d, &s);
        let back: DatasetManifest =
            serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(m.counts["class0"], 5);
    }
}
