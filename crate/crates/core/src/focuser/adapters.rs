use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;
use std::process::Command;

use serde::Deserialize;

use super::{AdapterError, DetectorAdapter, RegionRequest};
use crate::geometry::BBox;

/// One line of a file-backed detector script.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDetectorRecord {
    pub frame_id: String,
    pub region: usize,
    pub boxes: Vec<BBox>,
}

/// Replays region-local detections from a JSON-lines file keyed by
/// `(frame_id, region)`. Regions without an entry yield no detections.
#[derive(Debug, Default, Clone)]
pub struct FileDetector {
    table: HashMap<(String, usize), Vec<BBox>>,
}

impl FileDetector {
    pub fn from_records(records: impl IntoIterator<Item = FileDetectorRecord>) -> Result<Self, AdapterError> {
        let mut table: HashMap<(String, usize), Vec<BBox>> = HashMap::new();
        for r in records {
            for b in &r.boxes {
                b.validate().map_err(|e| AdapterError::Malformed(e.to_string()))?;
            }
            table.entry((r.frame_id, r.region)).or_default().extend(r.boxes);
        }
        Ok(Self { table })
    }

    pub fn load(path: &Path) -> Result<Self, AdapterError> {
        let file = std::fs::File::open(path)?;
        let mut records = Vec::new();
        for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: FileDetectorRecord = serde_json::from_str(&line)
                .map_err(|e| AdapterError::Malformed(format!("{}:{}: {e}", path.display(), n + 1)))?;
            records.push(rec);
        }
        Self::from_records(records)
    }
}

impl DetectorAdapter for FileDetector {
    fn detect(&self, request: &RegionRequest<'_>) -> Result<Vec<BBox>, AdapterError> {
        Ok(self
            .table
            .get(&(request.frame_id.to_string(), request.region_index))
            .cloned()
            .unwrap_or_default())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CommandBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    score: f64,
}

/// Runs an external program once per region.
///
/// The crop is written as a PNG to a temporary file. Its path replaces every
/// `{crop}` token in the template, or is appended as the last argument when
/// the template has none. The program must print one JSON array of
/// `{x, y, w, h, score}` objects on standard output.
#[derive(Debug, Clone)]
pub struct CommandDetector {
    argv: Vec<String>,
    serial: bool,
}

impl CommandDetector {
    pub const PLACEHOLDER: &'static str = "{crop}";

    pub fn new(template: &str) -> Result<Self, AdapterError> {
        let argv = shell_words::split(template).map_err(|e| AdapterError::Malformed(format!("command template: {e}")))?;
        if argv.is_empty() {
            return Err(AdapterError::Malformed("empty command template".into()));
        }
        Ok(Self { argv, serial: false })
    }

    /// Forces one invocation at a time.
    pub fn serial(mut self, serial: bool) -> Self {
        self.serial = serial;
        self
    }

    fn command_line(&self, crop_path: &str) -> Vec<String> {
        let mut argv: Vec<String> = self
            .argv
            .iter()
            .map(|a| a.replace(Self::PLACEHOLDER, crop_path))
            .collect();
        if !self.argv.iter().any(|a| a.contains(Self::PLACEHOLDER)) {
            argv.push(crop_path.to_string());
        }
        argv
    }
}

impl DetectorAdapter for CommandDetector {
    fn detect(&self, request: &RegionRequest<'_>) -> Result<Vec<BBox>, AdapterError> {
        let crop = request.crop_image()?;
        let tmp = tempfile::Builder::new().prefix("region-").suffix(".png").tempfile()?;
        crop.save_with_format(tmp.path(), image::ImageFormat::Png)?;
        let argv = self.command_line(&tmp.path().to_string_lossy());
        let output = Command::new(&argv[0]).args(&argv[1..]).output()?;
        if !output.status.success() {
            return Err(AdapterError::CommandFailed {
                command: argv.join(" "),
                status: output.status.to_string(),
                stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
            });
        }
        let parsed: Vec<CommandBox> =
            serde_json::from_slice(&output.stdout).map_err(|e| AdapterError::Malformed(e.to_string()))?;
        parsed
            .into_iter()
            .map(|b| BBox::scored(b.x, b.y, b.w, b.h, b.score).map_err(|e| AdapterError::Malformed(e.to_string())))
            .collect()
    }

    fn is_serial(&self) -> bool {
        self.serial
    }

    fn needs_image(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::RgbImage;

    fn request<'a>(frame_id: &'a str, idx: usize, image: Option<&'a RgbImage>) -> RegionRequest<'a> {
        RegionRequest {
            frame_id,
            region_index: idx,
            crop: BBox::new(2., 2., 8., 6.).unwrap(),
            image,
        }
    }

    #[test]
    fn file_detector_lookup() {
        let det = FileDetector::from_records([FileDetectorRecord {
            frame_id: "f1".into(),
            region: 1,
            boxes: vec![BBox::scored(1., 1., 2., 2., 0.5).unwrap()],
        }])
        .unwrap();
        assert_eq!(det.detect(&request("f1", 1, None)).unwrap().len(), 1);
        assert!(det.detect(&request("f1", 0, None)).unwrap().is_empty());
        assert!(det.detect(&request("f2", 1, None)).unwrap().is_empty());
    }

    #[test]
    fn template_placeholder_expansion() {
        let det = CommandDetector::new("detect --input {crop} --fast").unwrap();
        assert_eq!(det.command_line("/t/a.png"), vec!["detect", "--input", "/t/a.png", "--fast"]);
        let det = CommandDetector::new("detect -q").unwrap();
        assert_eq!(det.command_line("/t/a.png"), vec!["detect", "-q", "/t/a.png"]);
    }

    #[test]
    fn command_detector_needs_image() {
        let det = CommandDetector::new("true").unwrap();
        assert!(matches!(det.detect(&request("f9", 0, None)), Err(AdapterError::MissingImage(f)) if f == "f9"));
    }

    #[cfg(unix)]
    #[test]
    fn command_detector_parses_stdout_and_reports_failures() {
        let img = RgbImage::new(16, 16);
        let ok = CommandDetector::new(r#"sh -c 'test -s "$0" && echo "[{\"x\":1,\"y\":2,\"w\":3,\"h\":4,\"score\":0.5}]"' {crop}"#)
            .unwrap();
        let boxes = ok.detect(&request("f", 0, Some(&img))).unwrap();
        assert_eq!(boxes, vec![BBox::scored(1., 2., 3., 4., 0.5).unwrap()]);

        let failing = CommandDetector::new("sh -c 'exit 3'").unwrap();
        assert!(matches!(
            failing.detect(&request("f", 0, Some(&img))),
            Err(AdapterError::CommandFailed { .. })
        ));

        let garbage = CommandDetector::new("sh -c 'echo not-json'").unwrap();
        assert!(matches!(garbage.detect(&request("f", 0, Some(&img))), Err(AdapterError::Malformed(_))));
    }
}
