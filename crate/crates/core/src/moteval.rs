//! MOT Challenge text I/O plus CLEAR-MOT and IDF1 scoring.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::assoc::{hungarian, PAD_COST};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::matrix::Matrix;

/// One line of a MOT Challenge file: `frame,id,x,y,w,h,conf,-1,-1,-1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotRecord {
    /// 1-based.
    pub frame: u32,
    /// `-1` in detection files.
    pub id: i64,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub conf: f64,
}

impl MotRecord {
    pub fn bbox(&self) -> BBox {
        BBox {
            x: self.x,
            y: self.y,
            w: self.w,
            h: self.h,
        }
    }

    pub fn new(frame: u32, id: i64, b: &BBox, conf: f64) -> Self {
        Self {
            frame,
            id,
            x: b.x,
            y: b.y,
            w: b.w,
            h: b.h,
            conf,
        }
    }
}

const FIELD_NAMES: [&str; 10] = ["frame", "id", "x", "y", "w", "h", "conf", "x3d", "y3d", "z3d"];

fn parse_line(line: &str, lineno: usize) -> Result<MotRecord> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 10 {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("expected 10 fields, found {}", fields.len()),
        });
    }
    let bad = |i: usize| Error::Parse {
        line: lineno,
        msg: format!("field {} ({}) is invalid: {:?}", i + 1, FIELD_NAMES[i], fields[i]),
    };
    let num = |i: usize| -> Result<f64> {
        fields[i]
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| bad(i))
    };
    let frame = fields[0].parse::<u32>().ok().filter(|&f| f >= 1).ok_or_else(|| bad(0))?;
    let id = fields[1].parse::<i64>().map_err(|_| bad(1))?;
    let (x, y, w, h, conf) = (num(2)?, num(3)?, num(4)?, num(5)?, num(6)?);
    if w <= 0.0 {
        return Err(bad(4));
    }
    if h <= 0.0 {
        return Err(bad(5));
    }
    for i in 7..10 {
        num(i)?;
    }
    Ok(MotRecord {
        frame,
        id,
        x,
        y,
        w,
        h,
        conf,
    })
}

/// Parses MOT text. Blank lines are skipped; line numbers in errors are 1-based.
pub fn parse_mot(text: &str) -> Result<Vec<MotRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, i + 1))
        .collect()
}

pub fn read_mot<R: BufRead>(reader: R) -> Result<Vec<MotRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(parse_line(&line, i + 1)?);
        }
    }
    Ok(out)
}

pub fn read_mot_file(path: impl AsRef<std::path::Path>) -> Result<Vec<MotRecord>> {
    let file = std::fs::File::open(path)?;
    read_mot(std::io::BufReader::new(file))
}

/// Writes records sorted by `(frame, id)`; floats use the shortest
/// representation that parses back to the same value.
pub fn write_mot<W: Write>(mut out: W, records: &[MotRecord]) -> Result<()> {
    let mut sorted = records.to_vec();
    sorted.sort_by_key(|r| (r.frame, r.id));
    for r in &sorted {
        writeln!(
            out,
            "{},{},{},{},{},{},{},-1,-1,-1",
            r.frame, r.id, r.x, r.y, r.w, r.h, r.conf
        )?;
    }
    Ok(())
}

pub fn format_mot(records: &[MotRecord]) -> String {
    let mut buf = Vec::new();
    write_mot(&mut buf, records).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("MOT output is ASCII")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameBreakdown {
    pub frame: u32,
    pub gt: usize,
    pub matches: usize,
    pub fp: usize,
    pub fn_: usize,
    pub idsw: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mota: f64,
    pub idf1: f64,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub idsw: usize,
    pub frag: usize,
    pub mt: usize,
    pub ml: usize,
    pub gt: usize,
    pub gt_ids: usize,
    pub idtp: usize,
    pub per_frame: Vec<FrameBreakdown>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        format!(
            "{:>7} {:>7} {:>6} {:>6} {:>5} {:>5} {:>4} {:>4} {:>6}\n{:>7.3} {:>7.3} {:>6} {:>6} {:>5} {:>5} {:>4} {:>4} {:>6}\n",
            "MOTA", "IDF1", "FP", "FN", "IDSW", "Frag", "MT", "ML", "GT",
            self.mota, self.idf1, self.fp, self.fn_, self.idsw, self.frag, self.mt, self.ml, self.gt
        )
    }
}

fn by_frame(records: &[MotRecord]) -> BTreeMap<u32, Vec<MotRecord>> {
    let mut map: BTreeMap<u32, Vec<MotRecord>> = BTreeMap::new();
    for r in records {
        map.entry(r.frame).or_default().push(*r);
    }
    for v in map.values_mut() {
        v.sort_by_key(|r| r.id);
    }
    map
}

/// CLEAR-MOT counts with correspondence persistence, plus IDF1.
///
/// Per frame, pairs matched in the previous frame are kept while their IoU
/// stays at or above `iou_thresh`; the rest is assigned by Hungarian on
/// `1 − IoU`. A GT id matched to a different result id than at its last
/// match counts one identity switch, including across gaps. A fragment
/// starts whenever a GT trajectory goes from tracked to untracked between
/// its first and last tracked frames.
pub fn clearmot(gt: &[MotRecord], res: &[MotRecord], iou_thresh: f64) -> EvalReport {
    let gt_frames = by_frame(gt);
    let res_frames = by_frame(res);
    let frames: BTreeSet<u32> = gt_frames.keys().chain(res_frames.keys()).copied().collect();
    let empty = Vec::new();

    let mut prev_pairs: HashMap<i64, i64> = HashMap::new();
    let mut last_match: HashMap<i64, i64> = HashMap::new();
    // Per GT id, the tracked flag of each frame it is present in.
    let mut tracked: BTreeMap<i64, Vec<bool>> = BTreeMap::new();
    let mut report = EvalReport::default();

    for &f in &frames {
        let g = gt_frames.get(&f).unwrap_or(&empty);
        let h = res_frames.get(&f).unwrap_or(&empty);
        let mut g_used = vec![false; g.len()];
        let mut h_used = vec![false; h.len()];
        let mut pairs: Vec<(usize, usize)> = Vec::new();

        for (gi, gr) in g.iter().enumerate() {
            if let Some(&hid) = prev_pairs.get(&gr.id) {
                if let Some(hi) = h.iter().position(|r| r.id == hid) {
                    if !h_used[hi] && gr.bbox().iou(&h[hi].bbox()) >= iou_thresh {
                        g_used[gi] = true;
                        h_used[hi] = true;
                        pairs.push((gi, hi));
                    }
                }
            }
        }
        let free_g: Vec<usize> = (0..g.len()).filter(|&i| !g_used[i]).collect();
        let free_h: Vec<usize> = (0..h.len()).filter(|&i| !h_used[i]).collect();
        if !free_g.is_empty() && !free_h.is_empty() {
            let cost = Matrix::from_fn(free_g.len(), free_h.len(), |a, b| {
                let iou = g[free_g[a]].bbox().iou(&h[free_h[b]].bbox());
                if iou >= iou_thresh {
                    1.0 - iou
                } else {
                    PAD_COST
                }
            });
            for (a, b) in hungarian(&cost).pairs {
                if cost.get(a, b) < PAD_COST {
                    pairs.push((free_g[a], free_h[b]));
                }
            }
        }

        let mut fb = FrameBreakdown {
            frame: f,
            gt: g.len(),
            matches: pairs.len(),
            fp: h.len() - pairs.len(),
            fn_: g.len() - pairs.len(),
            idsw: 0,
        };
        let mut matched_g = vec![false; g.len()];
        prev_pairs.clear();
        for &(gi, hi) in &pairs {
            let (gid, hid) = (g[gi].id, h[hi].id);
            matched_g[gi] = true;
            if let Some(&last) = last_match.get(&gid) {
                if last != hid {
                    fb.idsw += 1;
                }
            }
            last_match.insert(gid, hid);
            prev_pairs.insert(gid, hid);
        }
        for (gi, gr) in g.iter().enumerate() {
            tracked.entry(gr.id).or_default().push(matched_g[gi]);
        }
        report.fp += fb.fp;
        report.fn_ += fb.fn_;
        report.idsw += fb.idsw;
        report.gt += fb.gt;
        report.per_frame.push(fb);
    }

    for flags in tracked.values() {
        let hits = flags.iter().filter(|&&t| t).count();
        let ratio = hits as f64 / flags.len() as f64;
        if ratio >= 0.8 {
            report.mt += 1;
        }
        if ratio <= 0.2 {
            report.ml += 1;
        }
        if let (Some(first), Some(last)) = (
            flags.iter().position(|&t| t),
            flags.iter().rposition(|&t| t),
        ) {
            report.frag += flags[first..=last]
                .windows(2)
                .filter(|w| w[0] && !w[1])
                .count();
        }
    }
    report.gt_ids = tracked.len();
    let errors = (report.fp + report.fn_ + report.idsw) as f64;
    report.mota = 1.0 - errors / report.gt.max(1) as f64;
    let (idf1, idtp) = idf1_with_tp(gt, res, iou_thresh);
    report.idf1 = idf1;
    report.idtp = idtp;
    report
}

/// Global identity F1: GT ids are matched one-to-one to result ids so as to
/// maximize the number of frames where the pair overlaps with IoU ≥ threshold.
pub fn idf1(gt: &[MotRecord], res: &[MotRecord], iou_thresh: f64) -> f64 {
    idf1_with_tp(gt, res, iou_thresh).0
}

fn idf1_with_tp(gt: &[MotRecord], res: &[MotRecord], iou_thresh: f64) -> (f64, usize) {
    if gt.is_empty() && res.is_empty() {
        return (1.0, 0);
    }
    let gt_ids: Vec<i64> = gt.iter().map(|r| r.id).collect::<BTreeSet<_>>().into_iter().collect();
    let res_ids: Vec<i64> = res.iter().map(|r| r.id).collect::<BTreeSet<_>>().into_iter().collect();
    let gi: HashMap<i64, usize> = gt_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let ri: HashMap<i64, usize> = res_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut overlap = vec![vec![0usize; res_ids.len()]; gt_ids.len()];
    let res_frames = by_frame(res);
    for g in gt {
        if let Some(hs) = res_frames.get(&g.frame) {
            for h in hs {
                if g.bbox().iou(&h.bbox()) >= iou_thresh {
                    overlap[gi[&g.id]][ri[&h.id]] += 1;
                }
            }
        }
    }
    let idtp = if gt_ids.is_empty() || res_ids.is_empty() {
        0
    } else {
        let max = overlap.iter().flatten().copied().max().unwrap_or(0) as f64;
        let cost = Matrix::from_fn(gt_ids.len(), res_ids.len(), |r, c| max - overlap[r][c] as f64);
        hungarian(&cost)
            .pairs
            .iter()
            .map(|&(r, c)| overlap[r][c])
            .sum()
    };
    (2.0 * idtp as f64 / (gt.len() + res.len()) as f64, idtp)
}
