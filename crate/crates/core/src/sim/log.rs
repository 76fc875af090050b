//! Recorded sensor streams as newline-delimited JSON, one event per line.
//!
//! Each line carries an ISO-8601 stamp on a simulated epoch (so lexical and
//! temporal order agree), the exact `f64` time, the scenario id, a sensor tag
//! and the payload. Floats are written in shortest round-trip form, so
//! load-then-save reproduces the file byte for byte.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose2D;
use crate::sim::sensors::{LidarScan, OdometryDelta};
use crate::vlp::LedObservation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "sensor", content = "data", rename_all = "kebab-case")]
pub enum SensorData {
    GroundTruth(Pose2D),
    Odometry(OdometryDelta),
    Camera(Vec<LedObservation>),
    Lidar(LidarScan),
}

impl SensorData {
    pub fn tag(&self) -> &'static str {
        match self {
            SensorData::GroundTruth(_) => "ground-truth",
            SensorData::Odometry(_) => "odometry",
            SensorData::Camera(_) => "camera",
            SensorData::Lidar(_) => "lidar",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEvent {
    pub stamp: f64,
    pub data: SensorData,
}

/// Immutable record of one simulated run.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorLog {
    pub scenario_id: String,
    pub events: Vec<LogEvent>,
}

#[derive(Serialize, Deserialize)]
struct Record<'a> {
    stamp: String,
    t: f64,
    scenario: std::borrow::Cow<'a, str>,
    #[serde(flatten)]
    data: std::borrow::Cow<'a, SensorData>,
}

/// ISO-8601 rendering of a simulated time offset from the Unix epoch.
pub fn iso_stamp(t: f64) -> String {
    let nanos = (t * 1e9).round() as i64;
    let secs = nanos.div_euclid(1_000_000_000);
    let sub = nanos.rem_euclid(1_000_000_000) as u32;
    chrono::DateTime::from_timestamp(secs, sub)
        .map(|d| d.format("%Y-%m-%dT%H:%M:%S%.9fZ").to_string())
        .unwrap_or_default()
}

impl SensorLog {
    pub fn duration(&self) -> f64 {
        match (self.events.first(), self.events.last()) {
            (Some(a), Some(b)) => b.stamp - a.stamp,
            _ => 0.0,
        }
    }

    pub fn odometry(&self) -> impl Iterator<Item = &OdometryDelta> {
        self.events.iter().filter_map(|e| match &e.data {
            SensorData::Odometry(d) => Some(d),
            _ => None,
        })
    }

    pub fn scans(&self) -> impl Iterator<Item = &LidarScan> {
        self.events.iter().filter_map(|e| match &e.data {
            SensorData::Lidar(s) => Some(s),
            _ => None,
        })
    }

    pub fn camera_frames(&self) -> impl Iterator<Item = (f64, &[LedObservation])> {
        self.events.iter().filter_map(|e| match &e.data {
            SensorData::Camera(c) => Some((e.stamp, c.as_slice())),
            _ => None,
        })
    }

    pub fn ground_truth(&self) -> impl Iterator<Item = (f64, Pose2D)> + '_ {
        self.events.iter().filter_map(|e| match &e.data {
            SensorData::GroundTruth(p) => Some((e.stamp, *p)),
            _ => None,
        })
    }

    /// Ground truth at exactly `stamp`, if recorded.
    pub fn truth_at(&self, stamp: f64) -> Option<Pose2D> {
        let i = self.events.partition_point(|e| e.stamp < stamp);
        self.events[i..]
            .iter()
            .take_while(|e| e.stamp == stamp)
            .find_map(|e| match e.data {
                SensorData::GroundTruth(p) => Some(p),
                _ => None,
            })
    }

    pub fn write_ndjson<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.events {
            let rec = Record {
                stamp: iso_stamp(e.stamp),
                t: e.stamp,
                scenario: self.scenario_id.as_str().into(),
                data: std::borrow::Cow::Borrowed(&e.data),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n").map_err(|e| Error::io("<sensor log>", e))?;
        }
        Ok(())
    }

    pub fn to_ndjson(&self) -> String {
        let mut buf = Vec::new();
        self.write_ndjson(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_ndjson<R: BufRead>(input: R) -> Result<Self> {
        let mut scenario_id: Option<String> = None;
        let mut events = Vec::new();
        for (n, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<sensor log>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| Error::parse(format!("sensor log line {}", n + 1), e))?;
            match &scenario_id {
                None => scenario_id = Some(rec.scenario.to_string()),
                Some(id) if id.as_str() != rec.scenario => {
                    return Err(Error::parse(format!("sensor log line {}", n + 1), "mixed scenario ids"));
                }
                _ => {}
            }
            events.push(LogEvent {
                stamp: rec.t,
                data: rec.data.into_owned(),
            });
        }
        Ok(Self {
            scenario_id: scenario_id.unwrap_or_default(),
            events,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_ndjson(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_ndjson(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iso_stamps_sort_like_times() {
        assert_eq!(iso_stamp(0.0), "1970-01-01T00:00:00.000000000Z");
        assert_eq!(iso_stamp(12.5), "1970-01-01T00:00:12.500000000Z");
        let times = [0.0, 0.05, 1.0 / 3.0, 9.99, 10.0, 230.0, 3601.25];
        let stamps: Vec<String> = times.iter().map(|&t| iso_stamp(t)).collect();
        let mut sorted = stamps.clone();
        sorted.sort();
        assert_eq!(stamps, sorted);
    }
}
