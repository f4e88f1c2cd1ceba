//! Dataset directory layout and loading.
//!
//! A dataset root holds three subdirectories of cloud files: `labeled/`
//! (full labels), `unlabeled/` (labels stripped), and `test/` (full
//! labels, held out). An optional `truth/` directory carries the labeled
//! originals of the unlabeled clouds, filename for filename; when present
//! it feeds the pseudo-label agreement diagnostic and never the loss.
//!
//! Files load in filename order, so the in-memory indices are stable
//! across runs and machines.

use std::path::Path;

use crate::cloudgen::read_cloud;
use crate::cloudgen::PointCloud;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Dataset {
    pub labeled: Vec<PointCloud>,
    pub unlabeled: Vec<PointCloud>,
    /// Labeled originals of `unlabeled`, index-aligned, when available.
    pub truth: Option<Vec<PointCloud>>,
    pub test: Vec<PointCloud>,
}

fn sorted_cloud_files(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("cannot read dataset dir {}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| Error::Config(format!("cannot list {}: {e}", dir.display())))?
            .path();
        if path.extension().is_some_and(|e| e == "geopc") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn load_dir(dir: &Path, n_classes: usize, want_labels: bool) -> Result<Vec<PointCloud>> {
    let mut clouds = Vec::new();
    for path in sorted_cloud_files(dir)? {
        let cloud = read_cloud(&path)?;
        if cloud.n_classes() != n_classes {
            return Err(Error::Config(format!(
                "{} declares {} classes, run expects {n_classes}",
                path.display(),
                cloud.n_classes()
            )));
        }
        if cloud.is_labeled() != want_labels {
            return Err(Error::Config(format!(
                "{} is {}labeled but {} clouds must {}carry labels",
                path.display(),
                if cloud.is_labeled() { "" } else { "un" },
                dir.file_name().unwrap_or_default().to_string_lossy(),
                if want_labels { "" } else { "not " },
            )));
        }
        clouds.push(cloud);
    }
    Ok(clouds)
}

/// Loads a dataset root. `labeled/` and `test/` must be non-empty;
/// `unlabeled/` may be empty (the fully supervised corner).
pub fn load_dataset(root: &Path, n_classes: usize) -> Result<Dataset> {
    let labeled = load_dir(&root.join("labeled"), n_classes, true)?;
    if labeled.is_empty() {
        return Err(Error::Config(format!(
            "{} holds no labeled clouds",
            root.join("labeled").display()
        )));
    }
    let test = load_dir(&root.join("test"), n_classes, true)?;
    if test.is_empty() {
        return Err(Error::Config(format!(
            "{} holds no test clouds",
            root.join("test").display()
        )));
    }
    let unlabeled_dir = root.join("unlabeled");
    let unlabeled = if unlabeled_dir.is_dir() {
        load_dir(&unlabeled_dir, n_classes, false)?
    } else {
        Vec::new()
    };

    let truth_dir = root.join("truth");
    let truth = if truth_dir.is_dir() {
        let truth = load_dir(&truth_dir, n_classes, true)?;
        if truth.len() != unlabeled.len() {
            return Err(Error::Config(format!(
                "{} holds {} clouds for {} unlabeled clouds",
                truth_dir.display(),
                truth.len(),
                unlabeled.len()
            )));
        }
        for (i, (t, u)) in truth.iter().zip(&unlabeled).enumerate() {
            if t.coords() != u.coords() {
                return Err(Error::Config(format!(
                    "truth cloud {i} does not share coordinates with its unlabeled twin"
                )));
            }
        }
        Some(truth)
    } else {
        None
    };

    Ok(Dataset {
        labeled,
        unlabeled,
        truth,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloudgen::write_cloud;
    use crate::cloudgen::{generate_arch, ArchSpec};

    fn tiny_cloud(seed: u64) -> PointCloud {
        generate_arch(&ArchSpec {
            n_classes: 3,
            n_points: 24,
            seed,
            ..ArchSpec::default()
        })
        .unwrap()
    }

    fn write_split(root: &Path, dir: &str, clouds: &[PointCloud]) {
        let d = root.join(dir);
        std::fs::create_dir_all(&d).unwrap();
        for (i, c) in clouds.iter().enumerate() {
            write_cloud(c, &d.join(format!("cloud_{i:04}.geopc"))).unwrap();
        }
    }

    #[test]
    fn round_trips_a_generated_layout() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path();
        let clouds: Vec<PointCloud> = (0..5).map(tiny_cloud).collect();
        write_split(root, "labeled", &clouds[..2]);
        write_split(root, "test", &clouds[4..]);
        let stripped: Vec<PointCloud> = clouds[2..4].iter().map(|c| c.without_labels()).collect();
        write_split(root, "unlabeled", &stripped);
        write_split(root, "truth", &clouds[2..4]);

        let ds = load_dataset(root, 3).unwrap();
        assert_eq!(ds.labeled.len(), 2);
        assert_eq!(ds.unlabeled.len(), 2);
        assert_eq!(ds.test.len(), 1);
        let truth = ds.truth.as_ref().unwrap();
        assert_eq!(truth[0].coords(), ds.unlabeled[0].coords());
        assert!(truth[0].is_labeled() && !ds.unlabeled[0].is_labeled());
        assert_eq!(ds.labeled[0], clouds[0]);
    }

    #[test]
    fn missing_truth_directory_is_fine() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path();
        write_split(root, "labeled", &[tiny_cloud(0)]);
        write_split(root, "test", &[tiny_cloud(1)]);
        let ds = load_dataset(root, 3).unwrap();
        assert!(ds.truth.is_none());
        assert!(ds.unlabeled.is_empty());
    }

    #[test]
    fn empty_required_split_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path();
        std::fs::create_dir_all(root.join("labeled")).unwrap();
        write_split(root, "test", &[tiny_cloud(1)]);
        assert!(load_dataset(root, 3).is_err());
    }

    #[test]
    fn label_presence_is_checked_per_split() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path();
        // A labeled cloud in unlabeled/ must be rejected.
        write_split(root, "labeled", &[tiny_cloud(0)]);
        write_split(root, "test", &[tiny_cloud(1)]);
        write_split(root, "unlabeled", &[tiny_cloud(2)]);
        assert!(load_dataset(root, 3).is_err());
    }

    #[test]
    fn class_count_mismatch_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path();
        write_split(root, "labeled", &[tiny_cloud(0)]);
        write_split(root, "test", &[tiny_cloud(1)]);
        assert!(load_dataset(root, 5).is_err());
    }

    #[test]
    fn truth_must_mirror_unlabeled() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path();
        write_split(root, "labeled", &[tiny_cloud(0)]);
        write_split(root, "test", &[tiny_cloud(1)]);
        write_split(root, "unlabeled", &[tiny_cloud(2).without_labels()]);
        // Different geometry under truth/.
        write_split(root, "truth", &[tiny_cloud(3)]);
        assert!(load_dataset(root, 3).is_err());
    }
}
