use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// One image file and the class it belongs to (index into
/// `DatasetIndex::classes`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRef {
    pub path: PathBuf,
    pub class: usize,
}

/// Folder-per-class dataset listing with deterministic lexicographic
/// ordering of classes and files.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub samples: Vec<SampleRef>,
}

impl DatasetIndex {
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.classes.len()];
        for s in &self.samples {
            counts[s.class] += 1;
        }
        counts
    }

    /// Sample indices belonging to one class, in listing order.
    pub fn class_members(&self, class: usize) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.class == class)
            .map(|(i, _)| i)
            .collect()
    }
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "pgm" | "ppm")
    )
}

/// Scan `root` for one subdirectory per class. Classes and the files
/// inside them are sorted by name so re-indexing yields identical output.
pub fn index_dataset(root: &Path) -> Result<DatasetIndex> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut class_dirs: Vec<(String, PathBuf)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() {
            let name = entry.file_name().to_string_lossy().into_owned();
            class_dirs.push((name, path));
        }
    }
    if class_dirs.is_empty() {
        return Err(Error::data(format!(
            "{}: no class subdirectories found",
            root.display()
        )));
    }
    if class_dirs.len() < 2 {
        return Err(Error::data(format!(
            "{}: only one class subdirectory found, need at least 2",
            root.display()
        )));
    }
    class_dirs.sort_by(|a, b| a.0.cmp(&b.0));
    let mut classes = Vec::with_capacity(class_dirs.len());
    let mut samples = Vec::new();
    for (class_idx, (name, dir)) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image_file(p))
            .collect();
        if files.is_empty() {
            return Err(Error::data(format!(
                "class {name:?} in {} contains no images",
                root.display()
            )));
        }
        files.sort();
        classes.push(name.clone());
        samples.extend(files.into_iter().map(|path| SampleRef {
            path,
            class: class_idx,
        }));
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        classes,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(path: &Path) {
        std::fs::write(path, b"x").unwrap();
    }

    #[test]
    fn lists_classes_and_files_sorted() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["zebra", "apple"] {
            std::fs::create_dir(dir.path().join(class)).unwrap();
        }
        touch(&dir.path().join("zebra/b.png"));
        touch(&dir.path().join("zebra/a.png"));
        touch(&dir.path().join("apple/1.pgm"));
        touch(&dir.path().join("apple/2.PPM"));
        touch(&dir.path().join("apple/skip.txt"));
        touch(&dir.path().join("loose.png")); // not inside a class dir

        let idx = index_dataset(dir.path()).unwrap();
        assert_eq!(idx.classes, vec!["apple", "zebra"]);
        assert_eq!(idx.samples.len(), 4);
        assert_eq!(idx.class_counts(), vec![2, 2]);
        assert!(idx.samples[0].path.ends_with("apple/1.pgm"));
        assert_eq!(idx.samples[3].class, 1);
        assert!(idx.samples[3].path.ends_with("zebra/b.png"));

        let again = index_dataset(dir.path()).unwrap();
        assert_eq!(idx.samples, again.samples);
    }

    #[test]
    fn empty_root_and_empty_class_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(index_dataset(dir.path()).is_err());
        std::fs::create_dir(dir.path().join("solo")).unwrap();
        touch(&dir.path().join("solo/a.png"));
        let err = index_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("at least 2"), "{err}");
        std::fs::create_dir(dir.path().join("hollow")).unwrap();
        let err = index_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("hollow"), "{err}");
        assert!(index_dataset(&dir.path().join("missing")).is_err());
    }
}
