//! Offline statistics over session logs and daily per-source traffic
//! matrices over sketch archives.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDate};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::TrafficSketch;
use crate::detection::AttackSession;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(source: R) -> Result<Vec<T>, JsonlError> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| JsonlError::Line { line: i + 1, source })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub value: f64,
    pub fraction: f64,
}

/// Empirical CDF at each distinct value.
pub fn empirical_cdf(values: &[f64]) -> Vec<CdfPoint> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out: Vec<CdfPoint> = Vec::new();
    for (i, x) in v.iter().enumerate() {
        let fraction = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.value == *x => last.fraction = fraction,
            _ => out.push(CdfPoint { value: *x, fraction }),
        }
    }
    out
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => 0.0,
        1 => sorted[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRow {
    pub session_id: u64,
    pub dst_as: u32,
    pub port: u16,
    pub duration_minutes: Option<f64>,
    pub peak_bps: f64,
    pub n_sources: usize,
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortCount {
    pub port: u16,
    pub sessions: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PortBox {
    pub port: u16,
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountBin {
    pub value: usize,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceContribution {
    pub src_as: u32,
    pub sessions: usize,
    pub peak_bps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackStats {
    pub total_sessions: usize,
    pub truncated_sessions: usize,
    pub sessions_under_10_min: usize,
    pub fraction_under_10_min: f64,
    pub sessions: Vec<SessionRow>,
    pub duration_cdf: Vec<CdfPoint>,
    pub peak_cdf: Vec<CdfPoint>,
    pub port_counts: Vec<PortCount>,
    pub port_boxes: Vec<PortBox>,
    /// Distinct source ASes per session → sessions.
    pub source_counts: Vec<CountBin>,
    pub median_sources: f64,
    pub top_sources: Vec<SourceContribution>,
    /// Sessions per multi-vector group → groups.
    pub multi_vector_groups: Vec<CountBin>,
}

pub const TOP_SOURCES: usize = 10;

pub fn compute_stats(sessions: &[AttackSession]) -> AttackStats {
    let rows: Vec<SessionRow> = sessions
        .iter()
        .map(|s| SessionRow {
            session_id: s.session_id,
            dst_as: s.dst_as,
            port: s.src_port,
            duration_minutes: s.duration_minutes,
            peak_bps: s.peak_volume_bps,
            n_sources: s.n_sources,
            truncated: s.truncated,
        })
        .collect();
    let durations: Vec<f64> = rows.iter().filter_map(|r| r.duration_minutes).collect();
    let peaks: Vec<f64> = rows.iter().map(|r| r.peak_bps).collect();
    let under = durations.iter().filter(|&&d| d < 10.0).count();

    let mut by_port: BTreeMap<u16, Vec<f64>> = BTreeMap::new();
    for r in &rows {
        by_port.entry(r.port).or_default().push(r.peak_bps);
    }
    let port_counts = by_port
        .iter()
        .map(|(&port, v)| PortCount { port, sessions: v.len() })
        .collect();
    let port_boxes = by_port
        .iter_mut()
        .map(|(&port, v)| {
            v.sort_by(f64::total_cmp);
            PortBox {
                port,
                n: v.len(),
                min: v[0],
                q1: quantile(v, 0.25),
                median: quantile(v, 0.5),
                q3: quantile(v, 0.75),
                max: v[v.len() - 1],
            }
        })
        .collect();

    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for r in &rows {
        *counts.entry(r.n_sources).or_default() += 1;
    }
    let mut n_sorted: Vec<f64> = rows.iter().map(|r| r.n_sources as f64).collect();
    n_sorted.sort_by(f64::total_cmp);

    let mut contrib: BTreeMap<u32, (usize, f64)> = BTreeMap::new();
    for s in sessions {
        for p in &s.source_peaks {
            let e = contrib.entry(p.src_as).or_insert((0, 0.0));
            e.0 += 1;
            e.1 = e.1.max(p.peak_bps);
        }
    }
    let mut top_sources: Vec<SourceContribution> = contrib
        .into_iter()
        .map(|(src_as, (n, peak))| SourceContribution {
            src_as,
            sessions: n,
            peak_bps: peak,
        })
        .collect();
    top_sources.sort_by(|a, b| {
        b.sessions
            .cmp(&a.sessions)
            .then(b.peak_bps.total_cmp(&a.peak_bps))
            .then(a.src_as.cmp(&b.src_as))
    });
    top_sources.truncate(TOP_SOURCES);

    let mut groups: BTreeMap<u64, usize> = BTreeMap::new();
    for s in sessions {
        if let Some(g) = s.multi_vector_group {
            *groups.entry(g).or_default() += 1;
        }
    }
    let mut group_hist: BTreeMap<usize, usize> = BTreeMap::new();
    for size in groups.values() {
        *group_hist.entry(*size).or_default() += 1;
    }

    AttackStats {
        total_sessions: rows.len(),
        truncated_sessions: rows.iter().filter(|r| r.truncated).count(),
        sessions_under_10_min: under,
        fraction_under_10_min: if durations.is_empty() {
            0.0
        } else {
            under as f64 / durations.len() as f64
        },
        duration_cdf: empirical_cdf(&durations),
        peak_cdf: empirical_cdf(&peaks),
        port_counts,
        port_boxes,
        source_counts: counts.into_iter().map(|(value, count)| CountBin { value, count }).collect(),
        median_sources: quantile(&n_sorted, 0.5),
        top_sources,
        multi_vector_groups: group_hist
            .into_iter()
            .map(|(value, count)| CountBin { value, count })
            .collect(),
        sessions: rows,
    }
}

impl AttackStats {
    /// One CSV file per table.
    pub fn write_csv_dir(&self, dir: &Path) -> Result<(), csv::Error> {
        fs::create_dir_all(dir)?;
        fn table<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), csv::Error> {
            let mut w = csv::Writer::from_path(path)?;
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
            Ok(())
        }
        table(&dir.join("sessions.csv"), &self.sessions)?;
        table(&dir.join("duration_cdf.csv"), &self.duration_cdf)?;
        table(&dir.join("peak_cdf.csv"), &self.peak_cdf)?;
        table(&dir.join("port_counts.csv"), &self.port_counts)?;
        table(&dir.join("port_boxplot.csv"), &self.port_boxes)?;
        table(&dir.join("source_counts.csv"), &self.source_counts)?;
        table(&dir.join("top_sources.csv"), &self.top_sources)?;
        table(&dir.join("multi_vector_groups.csv"), &self.multi_vector_groups)?;
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MatrixError {
    #[error("day range {from} to {to} is empty")]
    EmptyRange { from: NaiveDate, to: NaiveDate },
    #[error("sketch archive has no data for {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "))]
    MissingDays(Vec<NaiveDate>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficMatrix {
    pub dst_as: u32,
    pub port: u16,
    pub days: Vec<NaiveDate>,
    pub src_as: Vec<u32>,
    /// `bytes[row][day]`, attack intervals excluded.
    pub bytes: Vec<Vec<u64>>,
    /// Key bytes inside session intervals over the range.
    pub excluded_bytes: u64,
    /// All key bytes over the range.
    pub total_bytes: u64,
}

impl TrafficMatrix {
    pub fn megabytes(&self, row: usize, day: usize) -> f64 {
        self.bytes[row][day] as f64 / 1e6
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["src_as".to_string()];
        header.extend(self.days.iter().map(|d| d.to_string()));
        w.write_record(&header)?;
        for (i, asn) in self.src_as.iter().enumerate() {
            let mut rec = vec![asn.to_string()];
            rec.extend((0..self.days.len()).map(|d| format!("{:.6}", self.megabytes(i, d))));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn day_of(ts: u64) -> NaiveDate {
    let secs = i64::try_from(ts).unwrap_or(i64::MAX);
    DateTime::from_timestamp(secs, 0)
        .map(|d| d.date_naive())
        .unwrap_or(NaiveDate::MAX)
}

/// True when interval `t` lies inside the session: `[start, end)`, or
/// `[start, end]` for truncated sessions whose end was still anomalous.
pub fn in_session(s: &AttackSession, t: u64) -> bool {
    match s.end {
        None => t >= s.start,
        Some(end) if s.truncated => (s.start..=end).contains(&t),
        Some(end) => (s.start..end).contains(&t),
    }
}

/// Daily bytes per source AS toward (`dst_as`, `port`) over `[from, to]`.
/// Rows are `sources` when given, else every source seen for the key in
/// the range (including sources seen only during attacks).
pub fn traffic_matrix(
    sketches: &[TrafficSketch],
    sessions: &[AttackSession],
    dst_as: u32,
    port: u16,
    from: NaiveDate,
    to: NaiveDate,
    sources: Option<&[u32]>,
) -> Result<TrafficMatrix, MatrixError> {
    if to < from {
        return Err(MatrixError::EmptyRange { from, to });
    }
    let days: Vec<NaiveDate> = from.iter_days().take_while(|d| *d <= to).collect();
    let covered: BTreeSet<NaiveDate> = sketches.iter().map(|s| day_of(s.interval_start)).collect();
    let missing: Vec<NaiveDate> = days.iter().copied().filter(|d| !covered.contains(d)).collect();
    if !missing.is_empty() {
        return Err(MatrixError::MissingDays(missing));
    }

    let key_sessions: Vec<&AttackSession> = sessions
        .iter()
        .filter(|s| s.dst_as == dst_as && s.src_port == port)
        .collect();
    let mut cells: BTreeMap<u32, BTreeMap<NaiveDate, u64>> = BTreeMap::new();
    let mut excluded_bytes = 0;
    let mut total_bytes = 0;
    for s in sketches.iter().filter(|s| s.dst_as == dst_as && s.src_port == port) {
        let day = day_of(s.interval_start);
        if day < from || day > to {
            continue;
        }
        total_bytes += s.bytes;
        let excluded = key_sessions.iter().any(|sess| in_session(sess, s.interval_start));
        for (&src, &b) in &s.per_src {
            let row = cells.entry(src).or_default();
            if excluded {
                excluded_bytes += b;
            } else {
                *row.entry(day).or_default() += b;
            }
        }
    }

    let src_as: Vec<u32> = match sources {
        Some(list) => list.to_vec(),
        None => cells.keys().copied().collect(),
    };
    let bytes = src_as
        .iter()
        .map(|a| {
            days.iter()
                .map(|d| cells.get(a).and_then(|r| r.get(d)).copied().unwrap_or(0))
                .collect()
        })
        .collect();
    Ok(TrafficMatrix {
        dst_as,
        port,
        days,
        src_as,
        bytes,
        excluded_bytes,
        total_bytes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::SourcePeak;

    fn session(id: u64, port: u16, start: u64, minutes: u64, peak: f64) -> AttackSession {
        let mut s = AttackSession::open(id, 2354, port, start);
        s.peak_volume_bps = peak;
        s.close(start + minutes * 60, false);
        s
    }

    #[test]
    fn duration_cdf_example() {
        let ss = vec![session(1, 389, 0, 2, 1.0), session(2, 389, 0, 2, 2.0), session(3, 123, 0, 10, 3.0)];
        let st = compute_stats(&ss);
        assert_eq!(st.duration_cdf.len(), 2);
        assert_eq!(st.duration_cdf[0], CdfPoint { value: 2.0, fraction: 2.0 / 3.0 });
        assert_eq!(st.duration_cdf[1], CdfPoint { value: 10.0, fraction: 1.0 });
        assert_eq!(st.sessions_under_10_min, 2);
        assert_eq!(st.port_counts, vec![PortCount { port: 123, sessions: 1 }, PortCount { port: 389, sessions: 2 }]);
    }

    #[test]
    fn empty_log_has_zero_totals() {
        let st = compute_stats(&[]);
        assert_eq!(st.total_sessions, 0);
        assert_eq!(st.fraction_under_10_min, 0.0);
        assert!(st.duration_cdf.is_empty());
        assert_eq!(st.median_sources, 0.0);
    }

    #[test]
    fn group_histogram() {
        let mut a = session(1, 123, 0, 5, 1.0);
        let mut b = session(2, 389, 60, 5, 1.0);
        a.multi_vector_group = Some(1);
        b.multi_vector_group = Some(1);
        let st = compute_stats(&[a, b, session(3, 53, 0, 1, 1.0)]);
        assert_eq!(st.multi_vector_groups, vec![CountBin { value: 2, count: 1 }]);
    }

    #[test]
    fn quartiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.25), 1.75);
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.75), 3.25);
    }

    #[test]
    fn top_sources_by_participation() {
        let mut ss: Vec<AttackSession> = (1..=3).map(|i| session(i, 389, 0, 1, 1.0)).collect();
        for (i, s) in ss.iter_mut().enumerate() {
            s.source_peaks.push(SourcePeak { src_as: 7, peak_bps: i as f64 });
            if i > 0 {
                s.source_peaks.push(SourcePeak { src_as: 8, peak_bps: 10.0 });
            }
        }
        let st = compute_stats(&ss);
        assert_eq!(st.top_sources[0], SourceContribution { src_as: 7, sessions: 3, peak_bps: 2.0 });
        assert_eq!(st.top_sources[1].src_as, 8);
    }

    fn sketch(t: u64, per_src: &[(u32, u64)]) -> TrafficSketch {
        TrafficSketch {
            interval_start: t,
            src_port: 389,
            dst_as: 2354,
            bytes: per_src.iter().map(|p| p.1).sum(),
            per_src: per_src.iter().copied().collect(),
        }
    }

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    #[test]
    fn steady_row_and_attack_only_row() {
        let day = 86_400;
        let mut sk = Vec::new();
        for k in 0..3u64 {
            sk.push(sketch(k * day, &[(100, 100_000_000)]));
        }
        sk.push(sketch(day + 600, &[(200, 5_000_000)]));
        let attack = session(1, 389, day + 600, 1, 1.0);
        let m = traffic_matrix(&sk, &[attack], 2354, 389, d("1970-01-01"), d("1970-01-03"), None).unwrap();
        assert_eq!(m.src_as, vec![100, 200]);
        assert_eq!(m.bytes[0], vec![100_000_000; 3]);
        assert_eq!(m.bytes[1], vec![0; 3]);
        assert_eq!(m.excluded_bytes, 5_000_000);
        let mut csv = Vec::new();
        m.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("src_as,1970-01-01,1970-01-02,1970-01-03\n100,100.000000,"));
    }

    #[test]
    fn truncated_session_excludes_its_end() {
        let mut s = AttackSession::open(1, 2354, 389, 60);
        s.close(120, true);
        assert!(in_session(&s, 120));
        s.truncated = false;
        assert!(!in_session(&s, 120));
        assert!(in_session(&s, 60));
    }

    #[test]
    fn missing_days_listed() {
        let sk = vec![sketch(0, &[(1, 1)])];
        let err = traffic_matrix(&sk, &[], 2354, 389, d("1970-01-01"), d("1970-01-03"), None).unwrap_err();
        assert_eq!(err, MatrixError::MissingDays(vec![d("1970-01-02"), d("1970-01-03")]));
        assert!(err.to_string().contains("1970-01-02, 1970-01-03"));
    }
}
