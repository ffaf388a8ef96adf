//! Skeleton sequence files, preprocessing and the synthetic dataset.
//!
//! Sequence files are plain text:
//!
//! ```text
//! skeleton v1 joints=9 persons=1 frames=2 label=3
//! 0.1 0.2 0.3
//! ...
//! ```
//!
//! After the header every frame contributes `persons * joints` lines of
//! `x y z`, persons in order. Floats carry 9 significant digits; `#` starts a
//! comment.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tsegcn_core::Tensor;

use crate::error::{Error, Result};
use crate::skeleton::TOY9_MIRROR;

/// Coordinates are stored person-major: `[persons, frames, joints, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub joints: usize,
    pub persons: usize,
    pub frames: usize,
    pub coords: Vec<f64>,
    pub label: Option<usize>,
}

impl SkeletonSequence {
    pub fn new(joints: usize, persons: usize, frames: usize, coords: Vec<f64>, label: Option<usize>) -> Result<Self> {
        if joints == 0 || persons == 0 || frames == 0 {
            return Err(Error::Dataset("sequences need at least one joint, person and frame".into()));
        }
        if coords.len() != persons * frames * joints * 3 {
            return Err(Error::Dataset(format!(
                "{} coordinates for {persons} x {frames} x {joints} x 3",
                coords.len()
            )));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::Dataset("coordinates must be finite".into()));
        }
        Ok(SkeletonSequence {
            joints,
            persons,
            frames,
            coords,
            label,
        })
    }

    #[inline]
    pub fn index(&self, person: usize, frame: usize, joint: usize) -> usize {
        ((person * self.frames + frame) * self.joints + joint) * 3
    }

    pub fn point(&self, person: usize, frame: usize, joint: usize) -> [f64; 3] {
        let i = self.index(person, frame, joint);
        [self.coords[i], self.coords[i + 1], self.coords[i + 2]]
    }
}

/// `%.9g`-style text: 9 significant digits, trailing zeros dropped,
/// exponent form outside `1e-5 ..= 1e9`.
pub fn format_float(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{v:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub fn serialize_sequence(seq: &SkeletonSequence) -> String {
    let label = seq.label.map_or_else(|| "-".to_string(), |l| l.to_string());
    let mut out = format!(
        "skeleton v1 joints={} persons={} frames={} label={label}\n",
        seq.joints, seq.persons, seq.frames
    );
    for t in 0..seq.frames {
        for m in 0..seq.persons {
            for n in 0..seq.joints {
                let [x, y, z] = seq.point(m, t, n);
                let _ = writeln!(out, "{} {} {}", format_float(x), format_float(y), format_float(z));
            }
        }
    }
    out
}

fn header_field<'a>(tok: Option<(usize, &'a str)>, key: &str, line: usize) -> Result<(usize, &'a str)> {
    let (col, tok) = tok.ok_or_else(|| Error::parse(line, 1, format!("header is missing `{key}=`")))?;
    let value = tok
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix('='))
        .ok_or_else(|| Error::parse(line, col, format!("expected `{key}=`, found `{tok}`")))?;
    Ok((col, value))
}

fn header_count(tok: Option<(usize, &str)>, key: &str, line: usize) -> Result<usize> {
    let (col, value) = header_field(tok, key, line)?;
    match value.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::parse(line, col, format!("`{key}` must be a positive integer, found `{value}`"))),
    }
}

/// Whitespace-separated tokens with their 1-based columns.
fn tokens(s: &str) -> impl Iterator<Item = (usize, &str)> {
    s.split_whitespace()
        .map(move |t| (t.as_ptr() as usize - s.as_ptr() as usize + 1, t))
}

pub fn parse_sequence(text: &str) -> Result<SkeletonSequence> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("")))
        .filter(|(_, l)| !l.trim().is_empty());

    let (hline, header) = lines.next().ok_or_else(|| Error::parse(1, 1, "empty sequence file"))?;
    let mut toks = tokens(header);
    match (toks.next(), toks.next()) {
        (Some((_, "skeleton")), Some((_, "v1"))) => {}
        _ => return Err(Error::parse(hline, 1, "expected `skeleton v1` header")),
    }
    let joints = header_count(toks.next(), "joints", hline)?;
    let persons = header_count(toks.next(), "persons", hline)?;
    let frames = header_count(toks.next(), "frames", hline)?;
    let (lcol, lval) = header_field(toks.next(), "label", hline)?;
    let label = match lval {
        "-" => None,
        v => Some(
            v.parse::<usize>()
                .map_err(|_| Error::parse(hline, lcol, format!("invalid label `{v}`")))?,
        ),
    };
    if let Some((col, extra)) = toks.next() {
        return Err(Error::parse(hline, col, format!("unexpected header field `{extra}`")));
    }

    let per_frame = persons * joints;
    let total = frames * per_frame;
    let mut coords = vec![0.0; total * 3];
    let mut seen = 0;
    let mut last_line = hline;
    for (line, content) in lines {
        if seen == total {
            return Err(Error::parse(line, 1, format!("data after the final frame ({frames} frames declared)")));
        }
        let (t, rest) = (seen / per_frame, seen % per_frame);
        let (m, n) = (rest / joints, rest % joints);
        let mut xyz = [0.0; 3];
        let mut count = 0;
        for (col, tok) in tokens(content) {
            if count == 3 {
                return Err(Error::parse(line, col, "expected exactly three coordinates"));
            }
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::parse(line, col, format!("invalid number `{tok}`")))?;
            if !v.is_finite() {
                return Err(Error::parse(line, col, format!("non-finite coordinate `{tok}`")));
            }
            xyz[count] = v;
            count += 1;
        }
        if count < 3 {
            return Err(Error::parse(
                line,
                content.trim_end().len() + 1,
                format!("expected three coordinates, found {count}"),
            ));
        }
        let base = ((m * frames + t) * joints + n) * 3;
        coords[base..base + 3].copy_from_slice(&xyz);
        seen += 1;
        last_line = line;
    }
    if seen < total {
        let t = seen / per_frame;
        return Err(Error::parse(
            last_line + 1,
            1,
            format!(
                "truncated frame {t}: {} of {per_frame} joint lines present",
                seen % per_frame
            ),
        ));
    }
    SkeletonSequence::new(joints, persons, frames, coords, label)
}

pub fn read_sequence(path: impl AsRef<Path>) -> Result<SkeletonSequence> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_sequence(&text).map_err(|e| e.in_file(path))
}

pub fn write_sequence(path: impl AsRef<Path>, seq: &SkeletonSequence) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, serialize_sequence(seq)).map_err(|e| Error::io(path, e))
}

/// Linear interpolation along time to exactly `t_target` frames; frame `i`
/// is read at source position `i (T - 1) / (t_target - 1)`.
pub fn resample(seq: &SkeletonSequence, t_target: usize) -> Result<SkeletonSequence> {
    if t_target == 0 {
        return Err(Error::Dataset("target frame count must be positive".into()));
    }
    if t_target == seq.frames {
        return Ok(seq.clone());
    }
    let row = seq.joints * 3;
    let mut coords = vec![0.0; seq.persons * t_target * row];
    let scale = if t_target > 1 {
        (seq.frames - 1) as f64 / (t_target - 1) as f64
    } else {
        0.0
    };
    for m in 0..seq.persons {
        for i in 0..t_target {
            let pos = i as f64 * scale;
            let lo = (pos.floor() as usize).min(seq.frames - 1);
            let hi = (lo + 1).min(seq.frames - 1);
            let frac = pos - lo as f64;
            let a = &seq.coords[(m * seq.frames + lo) * row..(m * seq.frames + lo + 1) * row];
            let b = &seq.coords[(m * seq.frames + hi) * row..(m * seq.frames + hi + 1) * row];
            let dst = &mut coords[(m * t_target + i) * row..(m * t_target + i + 1) * row];
            for ((d, &x0), &x1) in dst.iter_mut().zip(a).zip(b) {
                *d = if frac == 0.0 { x0 } else { x0 + (x1 - x0) * frac };
            }
        }
    }
    SkeletonSequence::new(seq.joints, seq.persons, t_target, coords, seq.label)
}

/// Mean position over every joint and person of frame 0.
fn first_frame_center(seq: &SkeletonSequence) -> [f64; 3] {
    let mut c = [0.0; 3];
    for m in 0..seq.persons {
        for n in 0..seq.joints {
            let p = seq.point(m, 0, n);
            for k in 0..3 {
                c[k] += p[k];
            }
        }
    }
    let count = (seq.persons * seq.joints) as f64;
    c.map(|v| v / count)
}

/// Folds persons into the batch: `[sum persons, N, T, 3]`, each sequence
/// resampled to `t_target` and centred on its first frame.
pub fn to_batch(seqs: &[SkeletonSequence], t_target: usize) -> Result<Tensor> {
    to_batch_with(seqs, t_target, None)
}

/// Like [`to_batch`] with exactly `persons` bodies per sequence: extra bodies
/// are dropped, missing ones are zero.
pub fn to_batch_persons(seqs: &[SkeletonSequence], t_target: usize, persons: usize) -> Result<Tensor> {
    to_batch_with(seqs, t_target, Some(persons))
}

fn to_batch_with(seqs: &[SkeletonSequence], t_target: usize, persons: Option<usize>) -> Result<Tensor> {
    let first = seqs.first().ok_or_else(|| Error::Dataset("empty batch".into()))?;
    let n = first.joints;
    if let Some(s) = seqs.iter().find(|s| s.joints != n) {
        return Err(tsegcn_core::Error::dim("to_batch", &[n], &[s.joints]).into());
    }
    let bodies: usize = match persons {
        Some(p) => p * seqs.len(),
        None => seqs.iter().map(|s| s.persons).sum(),
    };
    let mut data = Vec::with_capacity(bodies * n * t_target * 3);
    for seq in seqs {
        let r = resample(seq, t_target)?;
        let c = first_frame_center(&r);
        let keep = persons.unwrap_or(r.persons);
        for m in 0..keep {
            if m >= r.persons {
                data.resize(data.len() + n * t_target * 3, 0.0);
                continue;
            }
            // [T, N, 3] -> [N, T, 3]
            for j in 0..n {
                for t in 0..t_target {
                    let p = r.point(m, t, j);
                    data.extend_from_slice(&[p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
                }
            }
        }
    }
    Ok(Tensor::new(vec![bodies, n, t_target, 3], data)?)
}

/// Reflects across the sagittal plane: negates x and relabels joints with
/// `perm`.
pub fn mirror(seq: &SkeletonSequence, perm: &[usize]) -> SkeletonSequence {
    let mut out = seq.clone();
    for m in 0..seq.persons {
        for t in 0..seq.frames {
            for n in 0..seq.joints {
                let [x, y, z] = seq.point(m, t, n);
                let i = out.index(m, t, perm[n]);
                out.coords[i..i + 3].copy_from_slice(&[-x, y, z]);
            }
        }
    }
    out
}

/// Synthetic arm-motion classes on the nine-joint toy skeleton.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SynthClass {
    /// Both arms swing together.
    InPhase = 0,
    /// The arms swing in opposition.
    AntiPhase = 1,
    LeftOnly = 2,
    RightOnly = 3,
}

impl SynthClass {
    pub const ALL: [SynthClass; 4] = [Self::InPhase, Self::AntiPhase, Self::LeftOnly, Self::RightOnly];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub seed: u64,
    pub jitter: f64,
    pub min_frames: usize,
    pub max_frames: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 4,
            samples_per_class: 32,
            seed: 0,
            jitter: 0.02,
            min_frames: 24,
            max_frames: 40,
        }
    }
}

/// Motion parameters of one generated sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthMotion {
    pub frames: usize,
    pub cycles: f64,
    pub phase: f64,
    pub amplitude: f64,
    pub scale: f64,
    pub translation: [f64; 3],
}

impl SynthMotion {
    pub fn sample(rng: &mut impl Rng, spec: &SynthSpec) -> Self {
        SynthMotion {
            frames: rng.random_range(spec.min_frames..=spec.max_frames),
            cycles: rng.random_range(1.0..2.0),
            phase: rng.random_range(0.0..2.0 * PI),
            amplitude: rng.random_range(0.6..1.2),
            scale: rng.random_range(0.9..1.1),
            translation: [
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ],
        }
    }
}

const SPINE_STEP: f64 = 0.25;
const ARM_SEGMENT: f64 = 0.25;

/// Noise-free pose sequence for `class`; left limbs sit at `+x`.
pub fn synth_pose(class: SynthClass, m: &SynthMotion) -> SkeletonSequence {
    let joints = 9;
    let mut coords = Vec::with_capacity(m.frames * joints * 3);
    for t in 0..m.frames {
        let s = m.amplitude * (2.0 * PI * m.cycles * t as f64 / m.frames as f64 + m.phase).sin();
        let (left, right) = match class {
            SynthClass::InPhase => (s, s),
            SynthClass::AntiPhase => (s, -s),
            SynthClass::LeftOnly => (s, 0.0),
            SynthClass::RightOnly => (0.0, s),
        };
        let mut frame = [[0.0; 3]; 9];
        for (k, p) in frame.iter_mut().take(5).enumerate() {
            *p = [0.0, SPINE_STEP * k as f64, 0.0];
        }
        let chest = frame[2];
        for (side, angle, elbow, hand) in [(1.0, left, 5, 6), (-1.0, right, 7, 8)] {
            let (c, s) = (angle.cos(), angle.sin());
            frame[elbow] = [chest[0] + side * ARM_SEGMENT * c, chest[1] + ARM_SEGMENT * s, 0.0];
            frame[hand] = [chest[0] + side * 2.0 * ARM_SEGMENT * c, chest[1] + 2.0 * ARM_SEGMENT * s, 0.0];
        }
        for p in frame {
            coords.extend(p.iter().zip(m.translation).map(|(v, t)| v * m.scale + t));
        }
    }
    SkeletonSequence::new(joints, 1, m.frames, coords, Some(class as usize)).expect("well-formed synthetic pose")
}

/// Deterministic labelled samples, classes interleaved. `stream` separates
/// independent splits drawn from the same seed.
pub fn synth_sequences(spec: &SynthSpec, stream: u64) -> Result<Vec<SkeletonSequence>> {
    if spec.classes == 0 || spec.classes > SynthClass::ALL.len() {
        return Err(Error::Dataset(format!("synthetic data has 1..=4 classes, not {}", spec.classes)));
    }
    if spec.min_frames == 0 || spec.min_frames > spec.max_frames {
        return Err(Error::Dataset("invalid synthetic frame range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let noise = Normal::new(0.0, spec.jitter).map_err(|e| Error::Dataset(e.to_string()))?;
    let mut out = Vec::with_capacity(spec.classes * spec.samples_per_class);
    for _ in 0..spec.samples_per_class {
        for &class in &SynthClass::ALL[..spec.classes] {
            let motion = SynthMotion::sample(&mut rng, spec);
            let mut seq = synth_pose(class, &motion);
            for c in &mut seq.coords {
                *c += noise.sample(&mut rng);
            }
            out.push(seq);
        }
    }
    Ok(out)
}

/// Mirror image of a toy-skeleton sequence.
pub fn mirror_toy(seq: &SkeletonSequence) -> SkeletonSequence {
    mirror(seq, &TOY9_MIRROR)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
}

/// Labelled file list. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub n_classes: usize,
    pub split: String,
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if e.label >= self.n_classes {
                return Err(tsegcn_core::Error::Label {
                    label: e.label,
                    n_classes: self.n_classes,
                }
                .into());
            }
            if !seen.insert(&e.path) {
                return Err(Error::Dataset(format!("duplicate path {}", e.path.display())));
            }
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(line)
                .map_err(|e| Error::parse(i + 1, e.column(), e.to_string()).in_file(path))?;
            entries.push(e);
        }
        let n_classes = entries.iter().map(|e| e.label + 1).max().unwrap_or(0);
        let m = DatasetManifest {
            entries,
            n_classes,
            split: path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
            root: path.parent().map_or_else(PathBuf::new, Path::to_path_buf),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads every listed sequence; manifest labels override file labels.
    pub fn load(&self) -> Result<Vec<SkeletonSequence>> {
        self.entries
            .iter()
            .map(|e| {
                let mut s = read_sequence(self.root.join(&e.path))?;
                s.label = Some(e.label);
                Ok(s)
            })
            .collect()
    }
}

/// Writes `seqs` under `root/split/` and the manifest `root/split.jsonl`.
pub fn write_split(root: &Path, split: &str, seqs: &[SkeletonSequence], n_classes: usize) -> Result<DatasetManifest> {
    let dir = root.join(split);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut entries = Vec::with_capacity(seqs.len());
    for (i, s) in seqs.iter().enumerate() {
        let rel = PathBuf::from(split).join(format!("{i:05}.skel"));
        write_sequence(root.join(&rel), s)?;
        entries.push(ManifestEntry {
            path: rel,
            label: s.label.ok_or_else(|| Error::Dataset("unlabelled sequence".into()))?,
        });
    }
    let m = DatasetManifest {
        entries,
        n_classes,
        split: split.into(),
        root: root.to_path_buf(),
    };
    m.validate()?;
    m.write(root.join(format!("{split}.jsonl")))?;
    Ok(m)
}

/// Generates train and test splits into `root`.
pub fn synth_dataset(root: &Path, train: &SynthSpec, test_per_class: usize) -> Result<(DatasetManifest, DatasetManifest)> {
    let tr = synth_sequences(train, 0)?;
    let te = synth_sequences(
        &SynthSpec {
            samples_per_class: test_per_class,
            ..*train
        },
        1,
    )?;
    Ok((
        write_split(root, "train", &tr, train.classes)?,
        write_split(root, "test", &te, train.classes)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_text() {
        assert_eq!(format_float(0.0), "0");
        assert_eq!(format_float(1.5), "1.5");
        assert_eq!(format_float(-0.25), "-0.25");
        assert_eq!(format_float(1.0 / 3.0), "0.333333333");
        assert_eq!(format_float(123456789.0), "123456789");
        assert_eq!(format_float(1.0e9), "1e9");
        assert_eq!(format_float(1.0e-6), "1e-6");
        assert_eq!(format_float(0.00012345678912), "0.000123456789");
        assert_eq!(format_float(9.9999999999), "10");
    }

    #[test]
    fn zero_sequence() {
        let text = "skeleton v1 joints=5 persons=1 frames=2 label=-\n".to_string() + &"0 0 0\n".repeat(10);
        let s = parse_sequence(&text).unwrap();
        assert_eq!((s.frames, s.label), (2, None));
        assert!(s.coords.iter().all(|&c| c == 0.0));
        assert_eq!(serialize_sequence(&s), text);
    }

    #[test]
    fn truncated_frame_reported_after_last_line() {
        let text = "skeleton v1 joints=5 persons=1 frames=2 label=0\n".to_string() + &"0 0 0\n".repeat(9);
        match parse_sequence(&text) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 11);
                assert!(message.contains("truncated frame 1"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_token_column() {
        let text = "skeleton v1 joints=1 persons=1 frames=1 label=0\n1 x 3\n";
        match parse_sequence(text) {
            Err(Error::Parse { line, column, .. }) => assert_eq!((line, column), (2, 3)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ramp_resample() {
        let s = SkeletonSequence::new(1, 1, 3, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 2.0, 0.0, 0.0], None).unwrap();
        let r = resample(&s, 5).unwrap();
        let xs: Vec<f64> = (0..5).map(|t| r.point(0, t, 0)[0]).collect();
        assert_eq!(xs, [0.0, 0.5, 1.0, 1.5, 2.0]);
    }

    #[test]
    fn persons_fold_into_batch() {
        let s = SkeletonSequence::new(2, 2, 3, (0..36).map(f64::from).collect(), None).unwrap();
        let b = to_batch(std::slice::from_ref(&s), 3).unwrap();
        assert_eq!(b.shape(), &[2, 2, 3, 3]);
        let p = to_batch_persons(&[s], 3, 3).unwrap();
        assert_eq!(p.shape(), &[3, 2, 3, 3]);
        assert!(p.data()[2 * 18..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mixed_joint_counts_rejected() {
        let a = SkeletonSequence::new(2, 1, 1, vec![0.0; 6], None).unwrap();
        let b = SkeletonSequence::new(3, 1, 1, vec![0.0; 9], None).unwrap();
        assert!(matches!(
            to_batch(&[a, b], 4),
            Err(Error::Core(tsegcn_core::Error::Dimension { .. }))
        ));
    }
}
