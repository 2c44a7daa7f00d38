use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::sim::ImageFrame;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const CATALOG: &str = "catalog.jsonl";
const IMAGES: &str = "images";
const LOCK: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub image_width: u32,
    pub image_height: u32,
    pub created_utc: String,
    pub notes: String,
}

impl Manifest {
    pub fn new(image_width: u32, image_height: u32, created_utc: impl Into<String>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            image_width,
            image_height,
            created_utc: created_utc.into(),
            notes: String::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordMode {
    Manual,
    Autopilot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub x_m: f64,
    pub y_m: f64,
    pub heading_rad: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LapRecord {
    pub progress_m: f64,
    pub lateral_offset_m: f64,
}

/// One catalog line: the commanded controls for a frame plus telemetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriveRecord {
    pub index: usize,
    pub image_ref: String,
    pub steering_norm: f64,
    pub throttle_norm: f64,
    pub timestamp_ms: u64,
    pub mode: RecordMode,
    pub speed_mps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<PoseRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lap: Option<LapRecord>,
}

impl DriveRecord {
    /// Record with the given controls; `index` and `image_ref` are assigned on append.
    pub fn new(steering_norm: f64, throttle_norm: f64, timestamp_ms: u64, mode: RecordMode) -> Self {
        Self {
            index: 0,
            image_ref: String::new(),
            steering_norm,
            throttle_norm,
            timestamp_ms,
            mode,
            speed_mps: 0.0,
            pose: None,
            lap: None,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("steering_norm", self.steering_norm),
            ("throttle_norm", self.throttle_norm),
        ] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::Domain(format!("{name} {v} outside [-1, 1]")));
            }
        }
        if !self.speed_mps.is_finite() {
            return Err(Error::Domain("speed_mps is not finite".into()));
        }
        Ok(())
    }
}

/// Exclusive writer lock, released on drop.
#[derive(Debug)]
struct WriteLock(PathBuf);

impl WriteLock {
    fn acquire(root: &Path) -> Result<Self> {
        let path = root.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Tub(format!(
                "{} is locked by another writer (remove {} if it is stale)",
                root.display(),
                path.display()
            ))),
            Err(e) => Err(Error::file(path, e)),
        }
    }
}

impl Drop for WriteLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// A tub directory: `manifest.json`, `catalog.jsonl` and `images/{index}.png`.
///
/// Writers hold an advisory lock file for their lifetime. Each append persists
/// the image first (write to a temporary name, then rename) and only then the
/// catalog line, so an interrupted append leaves at most an orphan image that
/// [`Tub::repair`] removes.
#[derive(Debug)]
pub struct Tub {
    root: PathBuf,
    manifest: Manifest,
    records: Vec<DriveRecord>,
    writer: Option<(File, WriteLock)>,
}

impl Tub {
    /// Creates a new tub at `path`, which must be absent or an empty directory.
    pub fn create(path: impl AsRef<Path>, manifest: Manifest) -> Result<Self> {
        let root = path.as_ref().to_path_buf();
        if root.exists() {
            let mut entries = fs::read_dir(&root).map_err(|e| Error::file(&root, e))?;
            if entries.next().is_some() {
                return Err(Error::Tub(format!(
                    "{} already exists and is not empty",
                    root.display()
                )));
            }
        }
        if manifest.image_width == 0 || manifest.image_height == 0 {
            return Err(Error::Tub("manifest image dimensions must be non-zero".into()));
        }
        fs::create_dir_all(root.join(IMAGES)).map_err(|e| Error::file(&root, e))?;
        let lock = WriteLock::acquire(&root)?;
        let manifest_path = root.join(MANIFEST);
        fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::file(&manifest_path, e))?;
        let catalog_path = root.join(CATALOG);
        let catalog = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(&catalog_path)
            .map_err(|e| Error::file(&catalog_path, e))?;
        Ok(Self {
            root,
            manifest,
            records: Vec::new(),
            writer: Some((catalog, lock)),
        })
    }

    /// Opens a completed tub read-only, validating the catalog and image files.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let root = path.as_ref().to_path_buf();
        let manifest_path = root.join(MANIFEST);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::file(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::Tub(format!(
                "unsupported tub schema version {}",
                manifest.schema_version
            )));
        }
        let catalog_path = root.join(CATALOG);
        let file = File::open(&catalog_path).map_err(|e| Error::file(&catalog_path, e))?;
        let mut records = Vec::new();
        for (line_no, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: DriveRecord = serde_json::from_str(&line).map_err(|e| {
                Error::Tub(format!("catalog line {} is corrupt: {e}", line_no + 1))
            })?;
            if record.index != records.len() {
                return Err(Error::Tub(format!(
                    "catalog line {} has index {}, expected {}",
                    line_no + 1,
                    record.index,
                    records.len()
                )));
            }
            record.validate()?;
            if !root.join(IMAGES).join(&record.image_ref).is_file() {
                return Err(Error::Tub(format!(
                    "record {} references missing image {}",
                    record.index, record.image_ref
                )));
            }
            records.push(record);
        }
        Ok(Self {
            root,
            manifest,
            records,
            writer: None,
        })
    }

    /// Opens an existing tub for further appends.
    pub fn open_append(path: impl AsRef<Path>) -> Result<Self> {
        let mut tub = Self::open(&path)?;
        let lock = WriteLock::acquire(&tub.root)?;
        tub.repair()?;
        let catalog_path = tub.root.join(CATALOG);
        let catalog = OpenOptions::new()
            .append(true)
            .open(&catalog_path)
            .map_err(|e| Error::file(&catalog_path, e))?;
        tub.writer = Some((catalog, lock));
        Ok(tub)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[DriveRecord] {
        &self.records
    }

    fn image_path(&self, image_ref: &str) -> PathBuf {
        self.root.join(IMAGES).join(image_ref)
    }

    /// Persists `frame` and appends `record`, assigning its index and image name.
    pub fn append_record(&mut self, frame: &ImageFrame, mut record: DriveRecord) -> Result<usize> {
        if frame.width_px != self.manifest.image_width
            || frame.height_px != self.manifest.image_height
        {
            return Err(Error::Shape(format!(
                "frame is {}x{}, tub stores {}x{}",
                frame.width_px, frame.height_px, self.manifest.image_width, self.manifest.image_height
            )));
        }
        record.validate()?;
        let index = self.records.len();
        record.index = index;
        record.image_ref = format!("{index}.png");
        let mut line = serde_json::to_string(&record)?;
        line.push('\n');

        let final_path = self.image_path(&record.image_ref);
        let tmp_path = final_path.with_extension("png.tmp");
        let img = RgbImage::from_raw(frame.width_px, frame.height_px, frame.pixels.clone())
            .ok_or_else(|| Error::Shape("frame buffer does not match its size".into()))?;
        img.save_with_format(&tmp_path, ImageFormat::Png)?;
        fs::rename(&tmp_path, &final_path).map_err(|e| Error::file(&final_path, e))?;

        let (catalog, _) = self
            .writer
            .as_mut()
            .ok_or_else(|| Error::Tub("tub was opened read-only".into()))?;
        catalog.write_all(line.as_bytes())?;
        catalog.flush()?;
        self.records.push(record);
        Ok(index)
    }

    pub fn read_image(&self, index: usize) -> Result<ImageFrame> {
        let record = self
            .records
            .get(index)
            .ok_or_else(|| Error::Tub(format!("record {index} does not exist")))?;
        let path = self.image_path(&record.image_ref);
        let img = image::open(&path)?.to_rgb8();
        if img.width() != self.manifest.image_width || img.height() != self.manifest.image_height {
            return Err(Error::Tub(format!(
                "{} is {}x{}, manifest says {}x{}",
                path.display(),
                img.width(),
                img.height(),
                self.manifest.image_width,
                self.manifest.image_height
            )));
        }
        ImageFrame::from_pixels(img.width(), img.height(), img.into_raw())
    }

    pub fn read_record(&self, index: usize) -> Result<(DriveRecord, ImageFrame)> {
        let frame = self.read_image(index)?;
        Ok((self.records[index].clone(), frame))
    }

    /// Image files in `images/` that no catalog line references.
    pub fn orphans(&self) -> Result<Vec<PathBuf>> {
        let dir = self.root.join(IMAGES);
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::file(&dir, e))? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let referenced = name
                .strip_suffix(".png")
                .and_then(|stem| stem.parse::<usize>().ok())
                .is_some_and(|i| i < self.records.len());
            if !referenced {
                out.push(path);
            }
        }
        out.sort();
        Ok(out)
    }

    /// Deletes orphan images left by an interrupted append. Returns how many.
    pub fn repair(&self) -> Result<usize> {
        let orphans = self.orphans()?;
        for path in &orphans {
            fs::remove_file(path).map_err(|e| Error::file(path, e))?;
        }
        Ok(orphans.len())
    }

    /// Appends every record of `other` (re-indexed) to this tub.
    pub fn merge_from(&mut self, other: &Tub) -> Result<usize> {
        for i in 0..other.len() {
            let (record, frame) = other.read_record(i)?;
            self.append_record(&frame, record)?;
        }
        Ok(other.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(seed: u8) -> ImageFrame {
        let px = (0..4 * 3 * 3).map(|i| (i as u8).wrapping_mul(seed)).collect();
        ImageFrame::from_pixels(4, 3, px).unwrap()
    }

    fn manifest() -> Manifest {
        Manifest {
            notes: "unit test".into(),
            ..Manifest::new(4, 3, "2024-01-01T00:00:00Z")
        }
    }

    #[test]
    fn create_then_open_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tub");
        drop(Tub::create(&path, manifest()).unwrap());
        let tub = Tub::open(&path).unwrap();
        assert_eq!(tub.len(), 0);
        assert_eq!(tub.manifest(), &manifest());
    }

    #[test]
    fn refuses_to_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tub");
        drop(Tub::create(&path, manifest()).unwrap());
        assert!(matches!(Tub::create(&path, manifest()), Err(Error::Tub(_))));
        // an empty directory is fine
        let empty = dir.path().join("empty");
        fs::create_dir(&empty).unwrap();
        Tub::create(&empty, manifest()).unwrap();
    }

    #[test]
    fn append_validates_controls_and_dims() {
        let dir = tempfile::tempdir().unwrap();
        let mut tub = Tub::create(dir.path().join("t"), manifest()).unwrap();
        let bad = DriveRecord::new(1.5, 0.0, 0, RecordMode::Manual);
        assert!(matches!(tub.append_record(&frame(1), bad), Err(Error::Domain(_))));
        let ok = DriveRecord::new(0.5, 0.0, 0, RecordMode::Manual);
        let big = ImageFrame::filled(5, 3, [0, 0, 0]);
        assert!(matches!(tub.append_record(&big, ok.clone()), Err(Error::Shape(_))));
        assert_eq!(tub.append_record(&frame(1), ok).unwrap(), 0);
        assert_eq!(tub.len(), 1);
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t");
        let mut written = Vec::new();
        {
            let mut tub = Tub::create(&path, manifest()).unwrap();
            for i in 0..20u8 {
                let mut r = DriveRecord::new(
                    i as f64 / 20.0 - 0.5,
                    0.1 * (i % 7) as f64,
                    i as u64 * 50,
                    if i % 2 == 0 { RecordMode::Manual } else { RecordMode::Autopilot },
                );
                r.speed_mps = 0.123 * i as f64;
                r.pose = Some(PoseRecord { x_m: 1.0 / 3.0, y_m: i as f64, heading_rad: -0.1 });
                r.lap = Some(LapRecord { progress_m: 0.7, lateral_offset_m: -1e-17 });
                let f = frame(i + 1);
                tub.append_record(&f, r).unwrap();
                written.push(f);
            }
        }
        let tub = Tub::open(&path).unwrap();
        assert_eq!(tub.len(), 20);
        for (i, f) in written.iter().enumerate() {
            let (rec, img) = tub.read_record(i).unwrap();
            assert_eq!(&img, f);
            assert_eq!(rec.index, i);
            assert_eq!(rec.speed_mps, 0.123 * i as f64);
            assert_eq!(rec.pose.unwrap().x_m, 1.0 / 3.0);
            assert_eq!(rec.lap.unwrap().lateral_offset_m, -1e-17);
        }
    }

    #[test]
    fn second_writer_is_locked_out() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t");
        let tub = Tub::create(&path, manifest()).unwrap();
        assert!(Tub::open_append(&path).is_err());
        drop(tub);
        let mut again = Tub::open_append(&path).unwrap();
        again
            .append_record(&frame(2), DriveRecord::new(0.0, 0.0, 0, RecordMode::Manual))
            .unwrap();
    }

    #[test]
    fn orphan_image_is_detected_and_repaired() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t");
        {
            let mut tub = Tub::create(&path, manifest()).unwrap();
            tub.append_record(&frame(1), DriveRecord::new(0.0, 0.0, 0, RecordMode::Manual))
                .unwrap();
        }
        // simulate a crash after the image rename but before the catalog write
        fs::copy(path.join("images/0.png"), path.join("images/1.png")).unwrap();
        let tub = Tub::open(&path).unwrap();
        assert_eq!(tub.len(), 1);
        assert_eq!(tub.orphans().unwrap().len(), 1);
        assert_eq!(tub.repair().unwrap(), 1);
        assert!(tub.orphans().unwrap().is_empty());
    }

    #[test]
    fn missing_image_fails_open() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t");
        {
            let mut tub = Tub::create(&path, manifest()).unwrap();
            tub.append_record(&frame(1), DriveRecord::new(0.0, 0.0, 0, RecordMode::Manual))
                .unwrap();
        }
        fs::remove_file(path.join("images/0.png")).unwrap();
        assert!(Tub::open(&path).is_err());
    }

    #[test]
    fn merge_reindexes() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Tub::create(dir.path().join("a"), manifest()).unwrap();
        let mut b = Tub::create(dir.path().join("b"), manifest()).unwrap();
        for i in 0..3 {
            a.append_record(&frame(i), DriveRecord::new(0.1, 0.0, 0, RecordMode::Manual)).unwrap();
            b.append_record(&frame(i + 5), DriveRecord::new(-0.1, 0.0, 0, RecordMode::Manual)).unwrap();
        }
        drop(b);
        let b = Tub::open(dir.path().join("b")).unwrap();
        a.merge_from(&b).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a.records()[4].index, 4);
        assert_eq!(a.read_image(4).unwrap(), frame(6));
    }
}
