use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::EpisodeTrajectory;
use crate::error::{Error, Result};

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    }
}

/// Writes rows with a header derived from the row type's field names.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

const VIEW: f64 = 600.0;

/// Renders a rollout as SVG: grey obstacles, blue path, green goal.
pub fn trajectory_svg(tr: &EpisodeTrajectory) -> String {
    let scale = VIEW / tr.width.max(tr.height);
    let px = |x: f64, y: f64| (x * scale, VIEW - y * scale);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 600 600" width="600" height="600">"#
    );
    let (w, h) = (tr.width * scale, tr.height * scale);
    let _ = writeln!(
        s,
        r#"<rect x="0" y="{:.3}" width="{w:.3}" height="{h:.3}" fill="white" stroke="black"/>"#,
        VIEW - h
    );
    for ob in &tr.obstacles {
        let pts: Vec<String> = ob
            .polygon()
            .vertices()
            .iter()
            .map(|v| {
                let (x, y) = px(v.x, v.y);
                format!("{x:.3},{y:.3}")
            })
            .collect();
        let _ = writeln!(s, r#"<polygon points="{}" fill="grey"/>"#, pts.join(" "));
    }
    let (gx, gy) = px(tr.goal.x, tr.goal.y);
    let _ = writeln!(
        s,
        r#"<circle cx="{gx:.3}" cy="{gy:.3}" r="{:.3}" fill="green"/>"#,
        tr.goal_threshold * scale
    );
    let path: Vec<String> = tr
        .steps
        .iter()
        .map(|st| {
            let (x, y) = px(st.x, st.y);
            format!("{x:.3},{y:.3}")
        })
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline points="{}" fill="none" stroke="blue" stroke-width="2"/>"#,
        path.join(" ")
    );
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::TrajectoryStep;
    use crate::geometry::{Form, Obstacle, Point2};
    use crate::harness::EpisodeRow;
    use crate::intervals::IntervalSet;

    fn row(seed: u64) -> EpisodeRow {
        EpisodeRow {
            algorithm: "td3".into(),
            handler: "projection".into(),
            agent_seed: seed,
            env_seed: 3,
            episode_return: 115.16000000000001,
            steps: 15,
            solved: true,
            collided: false,
            allowed_fraction: 0.93,
            interval_count_mean: 1.2,
            interval_len_mean: 180.5,
            interval_len_min: 20.0,
            interval_len_max: 220.0,
            interval_len_var: 1e-7,
        }
    }

    #[test]
    fn csv_header_and_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        let rows = vec![row(1), row(2)];
        write_csv(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "algorithm,handler,agent_seed,env_seed,return,steps,solved,collided,allowed_fraction,\
             interval_count_mean,interval_len_mean,interval_len_min,interval_len_max,interval_len_var"
        );
        let back: Vec<EpisodeRow> = read_csv(&p).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn svg_layers() {
        let tr = EpisodeTrajectory {
            algorithm: "td3".into(),
            handler: "projection".into(),
            agent_seed: 0,
            env_seed: 0,
            width: 15.0,
            height: 15.0,
            goal: Point2::new(12.0, 12.0),
            goal_threshold: 0.5,
            obstacles: vec![Obstacle::fixed(Form::Octagon, Point2::new(7.5, 7.5), 1.0).unwrap()],
            steps: (0..3)
                .map(|t| TrajectoryStep {
                    t,
                    x: 1.0,
                    y: 1.0 + t as f64,
                    perspective: 90.0,
                    action: 0.0,
                    reward: 0.0,
                    allowed: IntervalSet::empty(),
                })
                .collect(),
        };
        let svg = trajectory_svg(&tr);
        assert!(svg.contains(r#"viewBox="0 0 600 600""#));
        assert!(svg.contains(r#"fill="grey""#));
        assert!(svg.contains(r#"stroke="blue""#));
        assert!(svg.contains(r#"<circle cx="480.000" cy="120.000" r="20.000" fill="green"/>"#));
        assert!(svg.contains("40.000,560.000 40.000,520.000 40.000,480.000"));
    }
}
