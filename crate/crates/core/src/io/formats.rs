//! On-disk formats: skeleton text, HFRM frame containers, PNM frame
//! directories, CSV tables and the hierarchy text document.
//!
//! Skeleton text holds one frame per line: `clip_id frame_idx J` followed by
//! `3J` (or `2J`) coordinates. A repeated `(clip_id, frame_idx)` pair starts
//! the next person of that clip.
//!
//! HFRM is `"HFRM"`, a version byte (1), a dtype byte (0 = u8, 1 = f64),
//! four little-endian u32 extents `T C H W` and the row-major samples.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hierarchy::{ConfusionMatrix, Hierarchy, Level};
use crate::preprocess::{CropRect, SkeletonSequence};
use crate::pruning::PassRecord;
use crate::tensor::Tensor;
use crate::train::EpochMetrics;

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn data_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}:{line}: {msg}", path.display()))
}

/// Shortest decimal that parses back to the same value.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_skeletons(path: &Path, clips: &[(u64, &[SkeletonSequence])]) -> Result<()> {
    let mut out = String::new();
    for (id, people) in clips {
        let frames = people.iter().map(SkeletonSequence::num_frames).max().unwrap_or(0);
        for t in 0..frames {
            for s in people.iter().filter(|s| t < s.num_frames()) {
                out.push_str(&format!("{id} {t} {}", s.num_joints()));
                for j in 0..s.num_joints() {
                    for v in s.joint(t, j) {
                        out.push(' ');
                        out.push_str(&fmt_f64(*v));
                    }
                }
                out.push('\n');
            }
        }
    }
    write_text(path, &out)
}

/// Skeleton sequences per clip id, one sequence per person.
pub fn read_skeletons(path: &Path) -> Result<BTreeMap<u64, Vec<SkeletonSequence>>> {
    let text = read_text(path)?;
    // clip -> person -> frames of joints
    let mut raw: BTreeMap<u64, Vec<Vec<Vec<Vec<f64>>>>> = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        let ln = ln + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 3 {
            return Err(data_err(path, ln, "expected clip_id frame_idx J coordinates"));
        }
        let id: u64 = fields[0].parse().map_err(|_| data_err(path, ln, format!("bad clip id {:?}", fields[0])))?;
        let t: usize = fields[1].parse().map_err(|_| data_err(path, ln, format!("bad frame index {:?}", fields[1])))?;
        let j: usize = fields[2].parse().map_err(|_| data_err(path, ln, format!("bad joint count {:?}", fields[2])))?;
        let coords = &fields[3..];
        let dims = if j > 0 && coords.len() == 3 * j {
            3
        } else if j > 0 && coords.len() == 2 * j {
            2
        } else {
            return Err(data_err(path, ln, format!("{} coordinates for {j} joints", coords.len())));
        };
        let values = coords
            .iter()
            .map(|c| c.parse::<f64>().map_err(|_| data_err(path, ln, format!("bad coordinate {c:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let joints: Vec<Vec<f64>> = values.chunks(dims).map(<[f64]>::to_vec).collect();
        let people = raw.entry(id).or_default();
        let person = people.iter().position(|p| p.len() == t);
        match person {
            Some(p) => people[p].push(joints),
            None if t == 0 => people.push(vec![joints]),
            None => return Err(data_err(path, ln, format!("clip {id} frame {t} does not continue any person"))),
        }
    }
    raw.into_iter()
        .map(|(id, people)| {
            let seqs = people
                .iter()
                .map(|p| SkeletonSequence::from_frames(p).map_err(|e| Error::Data(format!("{}: clip {id}: {e}", path.display()))))
                .collect::<Result<Vec<_>>>()?;
            Ok((id, seqs))
        })
        .collect()
}

/// Frames of one clip stored as bytes, `[T, C, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameStack {
    pub shape: [usize; 4],
    pub data: Vec<u8>,
}

impl FrameStack {
    pub fn new(shape: [usize; 4], data: Vec<u8>) -> Result<Self> {
        if shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("frame stack {shape:?} with {} samples", data.len())));
        }
        Ok(FrameStack { shape, data })
    }

    /// Intensities scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape.to_vec(), self.data.iter().map(|&v| f64::from(v) / 255.0).collect()).expect("validated shape")
    }
}

const HFRM_MAGIC: &[u8; 4] = b"HFRM";

fn hfrm_header(dtype: u8, shape: &[usize]) -> Result<Vec<u8>> {
    let mut out = HFRM_MAGIC.to_vec();
    out.push(1);
    out.push(dtype);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Shape(format!("extent {d} too large for HFRM")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(out)
}

pub fn write_hfrm(path: &Path, frames: &FrameStack) -> Result<()> {
    let mut out = hfrm_header(0, &frames.shape)?;
    out.extend_from_slice(&frames.data);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_hfrm_f64(path: &Path, frames: &Tensor) -> Result<()> {
    if frames.ndim() != 4 {
        return Err(Error::Shape(format!("HFRM stores [T,C,H,W], got {:?}", frames.shape())));
    }
    let mut out = hfrm_header(1, frames.shape())?;
    for v in frames.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Either sample type, as a `[T,C,H,W]` tensor (bytes scaled to `[0, 1]`).
pub fn read_hfrm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Data(format!("{}: {m}", path.display()));
    if bytes.len() < 22 || &bytes[..4] != HFRM_MAGIC {
        return Err(bad("not an HFRM file".into()));
    }
    if bytes[4] != 1 {
        return Err(bad(format!("unsupported HFRM version {}", bytes[4])));
    }
    let shape: Vec<usize> = (0..4)
        .map(|i| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let body = &bytes[22..];
    let data = match bytes[5] {
        0 if body.len() == n => body.iter().map(|&v| f64::from(v) / 255.0).collect(),
        1 if body.len() == 8 * n => body.chunks(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
        0 | 1 => return Err(bad(format!("payload of {} bytes does not match shape {shape:?}", body.len()))),
        d => return Err(bad(format!("unknown dtype {d}"))),
    };
    Tensor::new(shape, data).map_err(|e| bad(e.to_string()))
}

pub fn read_hfrm_u8(path: &Path) -> Result<FrameStack> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() >= 22 && &bytes[..4] == HFRM_MAGIC && bytes[4] == 1 && bytes[5] == 0 {
        let shape: Vec<usize> = (0..4)
            .map(|i| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().expect("4 bytes")) as usize)
            .collect();
        return FrameStack::new(shape.try_into().expect("four extents"), bytes[22..].to_vec())
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())));
    }
    Err(Error::Data(format!("{}: not a byte HFRM file", path.display())))
}

/// Write frames as `0000.pgm`, `0001.pgm`, ... (single channel) or `.ppm` (three channels).
pub fn write_pnm_dir(dir: &Path, frames: &FrameStack) -> Result<()> {
    let [t, c, h, w] = frames.shape;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let plane = h * w;
    for ti in 0..t {
        let frame = &frames.data[ti * c * plane..(ti + 1) * c * plane];
        let (path, result) = match c {
            1 => {
                let p = dir.join(format!("{ti:04}.pgm"));
                let img = image::GrayImage::from_raw(w as u32, h as u32, frame.to_vec()).expect("sized buffer");
                let r = img.save_with_format(&p, image::ImageFormat::Pnm);
                (p, r)
            }
            3 => {
                let p = dir.join(format!("{ti:04}.ppm"));
                let mut inter = Vec::with_capacity(3 * plane);
                for i in 0..plane {
                    inter.extend((0..3).map(|ci| frame[ci * plane + i]));
                }
                let img = image::RgbImage::from_raw(w as u32, h as u32, inter).expect("sized buffer");
                let r = img.save_with_format(&p, image::ImageFormat::Pnm);
                (p, r)
            }
            _ => return Err(Error::Shape(format!("PNM frames need 1 or 3 channels, got {c}"))),
        };
        result.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

/// Read every `.pgm`/`.ppm` file of `dir` in file-name order.
pub fn read_pnm_dir(dir: &Path) -> Result<FrameStack> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm" | "pnm")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("{}: no PNM frames", dir.display())));
    }
    let mut shape = None;
    let mut data = Vec::new();
    for f in &files {
        let img = image::open(f).map_err(|e| Error::Data(format!("{}: {e}", f.display())))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let c = if img.color().has_color() { 3 } else { 1 };
        if shape.is_some_and(|s| s != (c, h, w)) {
            return Err(Error::Data(format!("{}: frame size differs from the first frame", f.display())));
        }
        shape = Some((c, h, w));
        if c == 1 {
            data.extend_from_slice(img.to_luma8().as_raw());
        } else {
            let rgb = img.to_rgb8();
            for ci in 0..3 {
                data.extend(rgb.as_raw().iter().skip(ci).step_by(3));
            }
        }
    }
    let (c, h, w) = shape.expect("at least one frame");
    FrameStack::new([files.len(), c, h, w], data)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_csv(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| csv_err(path, e))?;
    let got = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if got.iter().collect::<Vec<_>>() != header {
        return Err(Error::Data(format!("{}: expected header {}", path.display(), header.join(","))));
    }
    r.records().map(|rec| rec.map_err(|e| csv_err(path, e))).collect()
}

fn field<T: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, i: usize) -> Result<T> {
    let line = rec.position().map_or(0, |p| p.line());
    let raw = rec.get(i).unwrap_or("");
    raw.parse().map_err(|_| data_err(path, line as usize, format!("bad value {raw:?} in column {}", i + 1)))
}

pub fn write_crops_csv(path: &Path, rows: &[(u64, CropRect)]) -> Result<()> {
    write_csv(
        path,
        &["clip_id", "x0", "y0", "x1", "y1"],
        rows.iter().map(|(id, r)| vec![id.to_string(), r.x0.to_string(), r.y0.to_string(), r.x1.to_string(), r.y1.to_string()]),
    )
}

pub fn read_crops_csv(path: &Path) -> Result<Vec<(u64, CropRect)>> {
    read_csv(path, &["clip_id", "x0", "y0", "x1", "y1"])?
        .iter()
        .map(|r| {
            Ok((
                field(path, r, 0)?,
                CropRect {
                    x0: field(path, r, 1)?,
                    y0: field(path, r, 2)?,
                    x1: field(path, r, 3)?,
                    y1: field(path, r, 4)?,
                },
            ))
        })
        .collect()
}

/// Clip metadata: `clip_id,label,split` with split `train` or `test`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelRow {
    pub clip_id: u64,
    pub label: usize,
    pub train: bool,
}

pub fn write_labels_csv(path: &Path, rows: &[LabelRow]) -> Result<()> {
    write_csv(
        path,
        &["clip_id", "label", "split"],
        rows.iter().map(|r| vec![r.clip_id.to_string(), r.label.to_string(), if r.train { "train" } else { "test" }.to_string()]),
    )
}

pub fn read_labels_csv(path: &Path) -> Result<Vec<LabelRow>> {
    read_csv(path, &["clip_id", "label", "split"])?
        .iter()
        .map(|r| {
            let train = match r.get(2) {
                Some("train") => true,
                Some("test") => false,
                other => {
                    let line = r.position().map_or(0, |p| p.line()) as usize;
                    return Err(data_err(path, line, format!("split must be train or test, got {other:?}")));
                }
            };
            Ok(LabelRow {
                clip_id: field(path, r, 0)?,
                label: field(path, r, 1)?,
                train,
            })
        })
        .collect()
}

pub const METRICS_HEADER: [&str; 10] = [
    "epoch", "lr", "train_loss", "head1_loss", "head2_loss", "head3_loss", "head4_loss", "val_loss", "val_accuracy", "stage",
];

pub fn metrics_rows(stage: &str, epochs: &[EpochMetrics]) -> Vec<Vec<String>> {
    epochs
        .iter()
        .map(|e| {
            let mut row = vec![e.epoch.to_string(), fmt_f64(e.lr), fmt_f64(e.train_loss)];
            row.extend(e.head_losses.iter().map(|h| h.map(fmt_f64).unwrap_or_default()));
            row.extend([fmt_f64(e.val_loss), fmt_f64(e.val_accuracy), stage.to_string()]);
            row
        })
        .collect()
}

pub fn write_metrics_csv(path: &Path, stages: &[(&str, &[EpochMetrics])]) -> Result<()> {
    write_csv(path, &METRICS_HEADER, stages.iter().flat_map(|(s, e)| metrics_rows(s, e)))
}

pub fn write_prune_csv(path: &Path, records: &[PassRecord]) -> Result<()> {
    write_csv(
        path,
        &["pass", "variant", "pruned_total", "val_accuracy"],
        records
            .iter()
            .map(|r| vec![r.pass.to_string(), r.variant.to_string(), r.pruned_total.to_string(), fmt_f64(r.val_accuracy)]),
    )
}

/// N rows of N numbers, no header.
pub fn write_confusion_csv(path: &Path, c: &ConfusionMatrix) -> Result<()> {
    let mut out = String::new();
    for i in 0..c.num_classes() {
        let row: Vec<String> = c.row(i).iter().map(|v| fmt_f64(*v)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn read_confusion_csv(path: &Path) -> Result<ConfusionMatrix> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        rows.push((0..rec.len()).map(|i| field(path, &rec, i)).collect::<Result<Vec<f64>>>()?);
    }
    ConfusionMatrix::from_rows(&rows).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Human-readable hierarchy: one `level` header per level followed by
/// `superclass: members` lines; the identity level is written out too.
pub fn hierarchy_to_text(h: &Hierarchy) -> String {
    let mut out = format!("classes {}\n", h.num_classes());
    for (l, level) in h.coarse_levels().iter().enumerate() {
        out.push_str(&format!("level {l} superclasses {}\n", level.num_superclasses));
        for (s, members) in level.groups().iter().enumerate() {
            let m: Vec<String> = members.iter().map(usize::to_string).collect();
            out.push_str(&format!("{s}: {}\n", m.join(" ")));
        }
    }
    out.push_str(&format!("level {} identity\n", h.coarse_levels().len()));
    out
}

pub fn hierarchy_from_text(text: &str) -> Result<Hierarchy> {
    let bad = |ln: usize, m: &str| Error::Data(format!("hierarchy line {ln}: {m}"));
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
    let (ln, first) = lines.next().ok_or_else(|| bad(1, "empty document"))?;
    let n: usize = first
        .strip_prefix("classes ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad(ln, "expected `classes N`"))?;
    let mut levels: Vec<Level> = Vec::new();
    let mut identity = false;
    for (ln, line) in lines {
        if identity {
            return Err(bad(ln, "content after the identity level"));
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["level", idx, "superclasses", k] => {
                if idx.parse::<usize>().ok() != Some(levels.len()) {
                    return Err(bad(ln, "levels must be numbered in order"));
                }
                let k: usize = k.parse().map_err(|_| bad(ln, "bad superclass count"))?;
                levels.push(Level {
                    num_superclasses: k,
                    assignment: vec![usize::MAX; n],
                });
            }
            ["level", _, "identity"] => identity = true,
            _ => {
                let (s, members) = line.split_once(':').ok_or_else(|| bad(ln, "expected `superclass: members`"))?;
                let level = levels.last_mut().ok_or_else(|| bad(ln, "members before any level"))?;
                let s: usize = s.trim().parse().map_err(|_| bad(ln, "bad superclass index"))?;
                for m in members.split_whitespace() {
                    let c: usize = m.parse().map_err(|_| bad(ln, "bad class id"))?;
                    if c >= n || level.assignment[c] != usize::MAX {
                        return Err(bad(ln, &format!("class {c} is out of range or listed twice")));
                    }
                    level.assignment[c] = s;
                }
            }
        }
    }
    if let Some(l) = levels.iter().position(|l| l.assignment.contains(&usize::MAX)) {
        return Err(Error::Data(format!("hierarchy level {l} leaves classes unassigned")));
    }
    Hierarchy::new(n, levels)
}

/// Attribution map `[C,T,H,W]` averaged over channels, as `t,y,x,value` rows.
pub fn write_attribution_csv(path: &Path, map: &Tensor) -> Result<()> {
    let s = map.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("attribution map must be [C,T,H,W], got {s:?}")));
    }
    let (c, t, h, w) = (s[0], s[1], s[2], s[3]);
    let vol = t * h * w;
    let mut rows = Vec::with_capacity(vol);
    for i in 0..vol {
        let v = (0..c).map(|ci| map.data()[ci * vol + i]).sum::<f64>() / c as f64;
        rows.push(vec![(i / (h * w)).to_string(), (i / w % h).to_string(), (i % w).to_string(), fmt_f64(v)]);
    }
    write_csv(path, &["t", "y", "x", "value"], rows)
}
