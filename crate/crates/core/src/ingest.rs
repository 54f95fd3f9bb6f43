//! Dataset manifests, frame loading and the synthetic clip generator.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::LabelSpace;
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::image::Image;
use crate::rng::make_rng;
use crate::sample::MESample;

pub const MANIFEST_HEADER: [&str; 8] =
    ["sample_id", "subject_id", "dataset_id", "frames_dir", "onset", "apex", "offset", "label"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub sample_id: String,
    pub subject_id: String,
    pub dataset_id: String,
    /// Resolved against the manifest directory when relative.
    pub frames_dir: PathBuf,
    pub onset: usize,
    pub apex: Option<usize>,
    pub offset: usize,
    pub label: String,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    pub labels: LabelSpace,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DatasetSummary {
    pub dataset_id: String,
    pub samples: usize,
    pub subjects: usize,
    pub classes: usize,
}

impl Manifest {
    pub fn subjects(&self) -> BTreeSet<&str> {
        self.rows.iter().map(|r| r.subject_id.as_str()).collect()
    }

    /// Sample, subject and class counts per dataset id.
    pub fn summary(&self) -> Vec<DatasetSummary> {
        let mut per: BTreeMap<&str, (usize, BTreeSet<&str>, BTreeSet<&str>)> = BTreeMap::new();
        for r in &self.rows {
            let e = per.entry(&r.dataset_id).or_default();
            e.0 += 1;
            e.1.insert(&r.subject_id);
            e.2.insert(&r.label);
        }
        per.into_iter()
            .map(|(d, (n, s, c))| DatasetSummary {
                dataset_id: d.to_string(),
                samples: n,
                subjects: s.len(),
                classes: c.len(),
            })
            .collect()
    }

    pub fn label_index(&self, row: &ManifestRow) -> usize {
        self.labels.index_of(&row.label).expect("labels validated at load")
    }
}

/// Parses and validates a manifest CSV.
///
/// When `labels` is `None` the label space is the sorted set of labels found
/// in the file. Row numbers in errors are 1-based file lines (the header is
/// line 1).
pub fn load_manifest(path: &Path, labels: Option<&LabelSpace>) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, &root, labels)
}

pub fn parse_manifest(text: &str, root: &Path, labels: Option<&LabelSpace>) -> Result<Manifest> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = rdr.headers()?.clone();
    let mut col = [0usize; 8];
    for (i, name) in MANIFEST_HEADER.iter().enumerate() {
        col[i] = header
            .iter()
            .position(|h| h == *name)
            .ok_or_else(|| Error::Manifest { row: 1, msg: format!("missing column `{name}`") })?;
    }

    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let err = |msg: String| Error::Manifest { row, msg };
        let field = |i: usize| rec.get(col[i]).unwrap_or("");
        let index = |i: usize| -> Result<usize> {
            field(i).parse::<usize>().map_err(|_| err(format!("unparsable {} `{}`", MANIFEST_HEADER[i], field(i))))
        };

        let sample_id = field(0).to_string();
        if sample_id.is_empty() {
            return Err(err("empty sample_id".into()));
        }
        if !seen.insert(sample_id.clone()) {
            return Err(err(format!("duplicate sample_id `{sample_id}`")));
        }
        let subject_id = field(1).to_string();
        if subject_id.is_empty() {
            return Err(err("empty subject_id".into()));
        }
        let onset = index(4)?;
        let apex = if field(5).is_empty() { None } else { Some(index(5)?) };
        let offset = index(6)?;
        if onset > offset {
            return Err(err(format!("onset {onset} after offset {offset}")));
        }
        if let Some(a) = apex {
            if a < onset || a > offset {
                return Err(err(format!("apex {a} outside [{onset}, {offset}]")));
            }
        }
        let label = field(7).to_string();
        if let Some(ls) = labels {
            if ls.index_of(&label).is_none() {
                return Err(err(format!("label `{label}` outside the label space")));
            }
        }
        let dir = PathBuf::from(field(3));
        let frames_dir = if dir.is_relative() { root.join(dir) } else { dir };
        rows.push(ManifestRow {
            sample_id,
            subject_id,
            dataset_id: field(2).to_string(),
            frames_dir,
            onset,
            apex,
            offset,
            label,
        });
    }
    if rows.is_empty() {
        log::warn!("manifest has no samples");
    }
    let labels = match labels {
        Some(l) => l.clone(),
        None => {
            let set: BTreeSet<&str> = rows.iter().map(|r| r.label.as_str()).collect();
            LabelSpace::new(set.into_iter().map(String::from).collect())?
        }
    };
    let m = Manifest { rows, labels };
    for s in m.summary() {
        log::info!("dataset {}: {} samples, {} subjects, {} classes", s.dataset_id, s.samples, s.subjects, s.classes);
    }
    Ok(m)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let root = path.parent().unwrap_or(Path::new(""));
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MANIFEST_HEADER)?;
    for r in rows {
        let dir = r.frames_dir.strip_prefix(root).unwrap_or(&r.frames_dir);
        w.write_record([
            r.sample_id.clone(),
            r.subject_id.clone(),
            r.dataset_id.clone(),
            dir.to_string_lossy().into_owned(),
            r.onset.to_string(),
            r.apex.map(|a| a.to_string()).unwrap_or_default(),
            r.offset.to_string(),
            r.label.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

const FRAME_EXTENSIONS: [&str; 9] = ["png", "jpg", "jpeg", "bmp", "tif", "tiff", "pgm", "ppm", "pnm"];

/// Frame files of a directory, sorted by file name.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Invalid(format!("missing frames: {}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e?.path();
        let ok = p
            .extension()
            .and_then(|x| x.to_str())
            .map(|x| FRAME_EXTENSIONS.contains(&x.to_ascii_lowercase().as_str()))
            .unwrap_or(false);
        if ok && p.is_file() {
            files.push(p);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Reads an 8-bit frame as `[0, 1]` floats, resized to `size x size`.
/// Grayscale files give one channel, anything else three.
pub fn load_frame(path: &Path, size: usize) -> Result<Image> {
    use image::imageops::FilterType;
    let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), msg: e.to_string() })?;
    let s = size as u32;
    let (w, h, channels, raw) = if img.color().has_color() {
        let mut rgb = img.to_rgb8();
        if rgb.width() != s || rgb.height() != s {
            rgb = image::imageops::resize(&rgb, s, s, FilterType::Triangle);
        }
        (rgb.width(), rgb.height(), 3, rgb.into_raw())
    } else {
        let mut g = img.to_luma8();
        if g.width() != s || g.height() != s {
            g = image::imageops::resize(&g, s, s, FilterType::Triangle);
        }
        (g.width(), g.height(), 1, g.into_raw())
    };
    let data = raw.into_iter().map(|v| f32::from(v) / 255.0).collect();
    Image::from_vec(h as usize, w as usize, channels, data)
}

/// Loads the frames of `row`, resized to `image_size`.
pub fn load_sample(row: &ManifestRow, labels: &LabelSpace, image_size: usize) -> Result<MESample> {
    let label = labels
        .index_of(&row.label)
        .ok_or_else(|| Error::Invalid(format!("sample {}: unknown label `{}`", row.sample_id, row.label)))?;
    let files = list_frames(&row.frames_dir)?;
    if files.is_empty() {
        return Err(Error::Invalid(format!(
            "sample {}: missing frames in {}",
            row.sample_id,
            row.frames_dir.display()
        )));
    }
    if row.offset >= files.len() {
        return Err(Error::Range(format!(
            "sample {}: offset out of range ({} >= {} frames)",
            row.sample_id,
            row.offset,
            files.len()
        )));
    }
    let frames = files.iter().map(|f| load_frame(f, image_size)).collect::<Result<Vec<_>>>()?;
    let s = MESample {
        sample_id: row.sample_id.clone(),
        subject_id: row.subject_id.clone(),
        dataset_id: row.dataset_id.clone(),
        frames,
        onset_idx: row.onset,
        apex_idx: row.apex,
        offset_idx: row.offset,
        label,
    };
    s.validate()?;
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub clips_per_subject: usize,
    pub frames_per_clip: usize,
    pub image_size: usize,
    pub n_classes: usize,
    pub motion_amplitude_px: f64,
    pub noise_sigma: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_subjects: 8,
            clips_per_subject: 9,
            frames_per_clip: 24,
            image_size: 32,
            n_classes: 3,
            motion_amplitude_px: 1.5,
            noise_sigma: 0.005,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self, k: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_subjects == 0 || self.clips_per_subject == 0 {
            return bad("synthetic dataset needs at least one subject and one clip".into());
        }
        if self.frames_per_clip < k {
            return bad(format!("frames_per_clip {} is shorter than k = {k}", self.frames_per_clip));
        }
        if self.n_classes < 2 {
            return bad(format!("n_classes must be at least 2, got {}", self.n_classes));
        }
        if self.image_size < 8 {
            return bad(format!("image_size {} too small", self.image_size));
        }
        if !(self.motion_amplitude_px >= 0.0 && self.motion_amplitude_px.is_finite()) {
            return bad(format!("motion amplitude must be nonnegative, got {}", self.motion_amplitude_px));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma must be nonnegative, got {}", self.noise_sigma));
        }
        Ok(())
    }
}

/// Ground-truth motion of one synthetic clip: a Gaussian-windowed
/// translation whose amplitude rises from zero at the onset to its maximum
/// at the apex and falls back to zero at the offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub sample_id: String,
    pub center: (f64, f64),
    pub sigma: (f64, f64),
    pub direction: (f64, f64),
    pub amplitude: f64,
    pub onset: usize,
    pub apex: usize,
    pub offset: usize,
}

impl SynthTruth {
    pub fn amplitude_at(&self, t: usize) -> f64 {
        use std::f64::consts::PI;
        if t < self.onset || t > self.offset {
            return 0.0;
        }
        let ramp = |num: usize, den: usize| {
            if den == 0 {
                1.0
            } else {
                0.5 * (1.0 - (PI * num as f64 / den as f64).cos())
            }
        };
        let r = if t <= self.apex {
            ramp(t - self.onset, self.apex - self.onset)
        } else {
            ramp(self.offset - t, self.offset - self.apex)
        };
        self.amplitude * r
    }

    /// Spatial window in `[0, 1]`, 1 at the region center.
    pub fn window(&self, x: f64, y: f64) -> f64 {
        let dx = (x - self.center.0) / self.sigma.0;
        let dy = (y - self.center.1) / self.sigma.1;
        (-0.5 * (dx * dx + dy * dy)).exp()
    }

    /// Displacement `(dx, dy)` of content at pixel `(x, y)` in frame `t`.
    pub fn displacement(&self, t: usize, x: f64, y: f64) -> (f64, f64) {
        let s = self.amplitude_at(t) * self.window(x, y);
        (s * self.direction.0, s * self.direction.1)
    }

    /// Exact flow from frame `ta` to frame `tb`.
    ///
    /// Frame `t` shows the base pattern at `p - d_t(p)`, so the content at
    /// `p` in `ta` sits at the fixed point `q = p - d_ta(p) + d_tb(q)` in `tb`.
    pub fn ground_truth_flow(&self, ta: usize, tb: usize, height: usize, width: usize) -> FlowField {
        FlowField::from_fn(height, width, |y, x| {
            let (px, py) = (x as f64, y as f64);
            let (ax, ay) = self.displacement(ta, px, py);
            let (bx, by) = (px - ax, py - ay);
            let (mut qx, mut qy) = (px, py);
            for _ in 0..50 {
                let (dx, dy) = self.displacement(tb, qx, qy);
                qx = bx + dx;
                qy = by + dy;
            }
            ((qx - px) as f32, (qy - py) as f32)
        })
    }
}

/// Smooth, textured face-like intensity pattern for one subject.
#[derive(Debug, Clone)]
pub struct FacePattern {
    face_center: (f64, f64),
    face_radii: (f64, f64),
    skin: f64,
    /// (x, y, sigma_x, sigma_y, amplitude)
    blobs: Vec<(f64, f64, f64, f64, f64)>,
    /// (kx, ky, phase, amplitude)
    gratings: Vec<(f64, f64, f64, f64)>,
}

impl FacePattern {
    pub fn new(size: usize, seed: u64) -> Self {
        Self::random(size, &mut make_rng(seed, "pattern"))
    }

    fn random<R: Rng>(size: usize, rng: &mut R) -> Self {
        let s = size as f64;
        let c = (s - 1.0) / 2.0;
        let mut blobs = vec![
            // eyes, brows, mouth, nose
            (c - 0.17 * s, 0.40 * s, 0.05 * s, 0.035 * s, -0.25),
            (c + 0.17 * s, 0.40 * s, 0.05 * s, 0.035 * s, -0.25),
            (c - 0.17 * s, 0.31 * s, 0.08 * s, 0.018 * s, -0.15),
            (c + 0.17 * s, 0.31 * s, 0.08 * s, 0.018 * s, -0.15),
            (c, 0.72 * s, 0.12 * s, 0.03 * s, -0.22),
            (c, 0.55 * s, 0.03 * s, 0.08 * s, 0.08),
        ];
        for b in blobs.iter_mut() {
            b.0 += rng.random_range(-0.02..0.02) * s;
            b.1 += rng.random_range(-0.02..0.02) * s;
            b.4 *= rng.random_range(0.8..1.2);
        }
        for _ in 0..12 {
            let sig = rng.random_range(0.04..0.10) * s;
            blobs.push((
                rng.random_range(0.0..s),
                rng.random_range(0.0..s),
                sig,
                sig * rng.random_range(0.7..1.4),
                rng.random_range(-0.12..0.12),
            ));
        }
        let gratings = (0..3)
            .map(|_| {
                let freq = rng.random_range(0.12..0.25) * std::f64::consts::TAU;
                let angle = rng.random_range(0.0..std::f64::consts::PI);
                (
                    freq * angle.cos(),
                    freq * angle.sin(),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.03..0.06),
                )
            })
            .collect();
        Self {
            face_center: (c + rng.random_range(-0.02..0.02) * s, c + rng.random_range(-0.02..0.02) * s),
            face_radii: (0.40 * s * rng.random_range(0.95..1.05), 0.47 * s * rng.random_range(0.95..1.05)),
            skin: rng.random_range(0.5..0.65),
            blobs,
            gratings,
        }
    }

    /// Intensity at continuous pixel coordinates.
    pub fn value(&self, x: f64, y: f64) -> f64 {
        let ex = (x - self.face_center.0) / self.face_radii.0;
        let ey = (y - self.face_center.1) / self.face_radii.1;
        let r = (ex * ex + ey * ey).sqrt();
        let inside = 1.0 / (1.0 + ((r - 1.0) * 12.0).exp());
        let mut v = 0.2 + (self.skin - 0.2) * inside;
        for &(bx, by, sx, sy, a) in &self.blobs {
            let dx = (x - bx) / sx;
            let dy = (y - by) / sy;
            v += a * (-0.5 * (dx * dx + dy * dy)).exp();
        }
        for &(kx, ky, ph, a) in &self.gratings {
            v += a * (kx * x + ky * y + ph).sin();
        }
        v.clamp(0.0, 1.0)
    }
}

/// Region row (fraction of height) and vertical direction for a class.
/// Regions are centered horizontally, so a mirror flip keeps the class.
fn class_motion(class: usize) -> (f64, f64, f64) {
    let row = [0.28, 0.70][class % 2];
    let dir = if (class / 2).is_multiple_of(2) {
        if class.is_multiple_of(2) {
            -1.0
        } else {
            1.0
        }
    } else if class.is_multiple_of(2) {
        1.0
    } else {
        -1.0
    };
    let widen = 1.0 + 0.5 * (class / 4) as f64;
    (row, dir, widen)
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub samples: Vec<MESample>,
    pub truths: Vec<SynthTruth>,
    pub labels: LabelSpace,
}

pub fn synth_labels(n_classes: usize) -> LabelSpace {
    LabelSpace::new((0..n_classes).map(|c| format!("class_{c}")).collect()).expect("distinct names")
}

/// Generates a class-balanced synthetic dataset. Equal `(spec, seed)` always
/// yields bit-identical pixels.
pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<SynthDataset> {
    spec.validate(1)?;
    let size = spec.image_size;
    let s = size as f64;
    let mut samples = Vec::new();
    let mut truths = Vec::new();
    for subj in 0..spec.n_subjects {
        let subject_id = format!("s{subj:02}");
        let face = FacePattern::random(size, &mut make_rng(seed, &format!("synth/subject/{subject_id}")));
        for clip in 0..spec.clips_per_subject {
            let sample_id = format!("{subject_id}_c{clip:02}");
            let label = (subj * spec.clips_per_subject + clip) % spec.n_classes;
            let mut rng = make_rng(seed, &format!("synth/clip/{sample_id}"));
            let (row, dir, widen) = class_motion(label);
            let onset = 0;
            let offset = spec.frames_per_clip - 1;
            let span = (offset - onset) as f64;
            let apex = onset + (rng.random_range(0.35..0.65) * span).round() as usize;
            let truth = SynthTruth {
                sample_id: sample_id.clone(),
                center: ((s - 1.0) / 2.0, row * (s - 1.0) + rng.random_range(-0.02..0.02) * s),
                sigma: (0.16 * s * widen, 0.09 * s),
                direction: (0.0, dir),
                amplitude: spec.motion_amplitude_px * rng.random_range(0.8..1.0),
                onset,
                apex,
                offset,
            };
            let mut noise_rng = make_rng(seed, &format!("synth/noise/{sample_id}"));
            let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
            let frames = (0..spec.frames_per_clip)
                .map(|t| {
                    Image::from_fn(size, size, 1, |y, x, _| {
                        let (dx, dy) = truth.displacement(t, x as f64, y as f64);
                        let mut v = face.value(x as f64 - dx, y as f64 - dy);
                        if spec.noise_sigma > 0.0 {
                            v += noise.sample(&mut noise_rng);
                        }
                        v.clamp(0.0, 1.0) as f32
                    })
                })
                .collect();
            samples.push(MESample {
                sample_id: sample_id.clone(),
                subject_id: subject_id.clone(),
                dataset_id: "synth".into(),
                frames,
                onset_idx: onset,
                apex_idx: Some(apex),
                offset_idx: offset,
                label,
            });
            truths.push(truth);
        }
    }
    Ok(SynthDataset { samples, truths, labels: synth_labels(spec.n_classes) })
}

/// Writes frames as 8-bit PNGs under `out/frames/<sample_id>/`, the manifest
/// as `out/manifest.csv` and the motion ground truth as `out/truth.jsonl`.
/// Returns the manifest path.
pub fn write_synthetic(ds: &SynthDataset, out: &Path) -> Result<PathBuf> {
    use std::io::Write;
    fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for s in &ds.samples {
        let dir = out.join("frames").join(&s.sample_id);
        fs::create_dir_all(&dir)?;
        for (t, f) in s.frames.iter().enumerate() {
            let g = f.to_gray();
            let px: Vec<u8> = g.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            let buf = image::GrayImage::from_raw(g.width() as u32, g.height() as u32, px).expect("size matches");
            let path = dir.join(format!("frame_{t:04}.png"));
            buf.save(&path).map_err(|e| Error::Image { path: path.clone(), msg: e.to_string() })?;
        }
        rows.push(ManifestRow {
            sample_id: s.sample_id.clone(),
            subject_id: s.subject_id.clone(),
            dataset_id: s.dataset_id.clone(),
            frames_dir: dir,
            onset: s.onset_idx,
            apex: s.apex_idx,
            offset: s.offset_idx,
            label: ds.labels.name(s.label).unwrap().to_string(),
        });
    }
    let manifest = out.join("manifest.csv");
    write_manifest(&manifest, &rows)?;
    let mut truth = fs::File::create(out.join("truth.jsonl"))?;
    for t in &ds.truths {
        writeln!(truth, "{}", serde_json::to_string(t)?)?;
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "sample_id,subject_id,dataset_id,frames_dir,onset,apex,offset,label\n";

    #[test]
    fn manifest_parsing() {
        let text = format!("{HEADER}a,s1,d,fa,0,3,9,happy\nb,s2,d,/abs/fb,1,,5,sad\n");
        let m = parse_manifest(&text, Path::new("/root"), None).unwrap();
        assert_eq!(m.rows.len(), 2);
        assert_eq!(m.rows[0].frames_dir, PathBuf::from("/root/fa"));
        assert_eq!(m.rows[1].frames_dir, PathBuf::from("/abs/fb"));
        assert_eq!(m.rows[1].apex, None);
        assert_eq!(m.labels.names(), &["happy".to_string(), "sad".to_string()]);
        assert_eq!(m.summary()[0].subjects, 2);
    }

    #[test]
    fn header_only_is_empty() {
        let m = parse_manifest(HEADER, Path::new(""), None).unwrap();
        assert!(m.rows.is_empty());
    }

    #[test]
    fn manifest_errors_carry_row_numbers() {
        let e = parse_manifest("sample_id,subject_id\n", Path::new(""), None).unwrap_err();
        assert!(matches!(e, Error::Manifest { row: 1, .. }), "{e}");

        let dup = format!("{HEADER}a,s1,d,f,0,,9,x\na,s1,d,f,0,,9,x\n");
        let e = parse_manifest(&dup, Path::new(""), None).unwrap_err();
        assert!(matches!(e, Error::Manifest { row: 3, .. }), "{e}");
        assert!(e.to_string().contains("duplicate"));

        let bad = format!("{HEADER}a,s1,d,f,zero,,9,x\n");
        let e = parse_manifest(&bad, Path::new(""), None).unwrap_err();
        assert!(matches!(e, Error::Manifest { row: 2, .. }), "{e}");

        let ls = LabelSpace::new(vec!["x".into()]).unwrap();
        let e = parse_manifest(&format!("{HEADER}a,s1,d,f,0,,9,y\n"), Path::new(""), Some(&ls)).unwrap_err();
        assert!(e.to_string().contains("outside the label space"));
    }

    #[test]
    fn synthetic_counts_and_balance() {
        let spec = SynthSpec { image_size: 16, frames_per_clip: 10, ..SynthSpec::default() };
        let ds = generate_synthetic(&spec, 1).unwrap();
        assert_eq!(ds.samples.len(), 72);
        let subjects: BTreeSet<_> = ds.samples.iter().map(|s| &s.subject_id).collect();
        assert_eq!(subjects.len(), 8);
        for c in 0..3 {
            assert_eq!(ds.samples.iter().filter(|s| s.label == c).count(), 24);
        }
        for s in &ds.samples {
            s.validate().unwrap();
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SynthSpec { n_subjects: 2, clips_per_subject: 2, image_size: 16, ..SynthSpec::default() };
        let a = generate_synthetic(&spec, 7).unwrap();
        let b = generate_synthetic(&spec, 7).unwrap();
        assert_eq!(a.samples, b.samples);
        let c = generate_synthetic(&spec, 8).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn zero_amplitude_gives_static_clips() {
        let spec = SynthSpec {
            n_subjects: 1,
            clips_per_subject: 3,
            motion_amplitude_px: 0.0,
            noise_sigma: 0.0,
            ..SynthSpec::default()
        };
        let ds = generate_synthetic(&spec, 2).unwrap();
        for s in &ds.samples {
            assert!(s.frames.iter().all(|f| f == &s.frames[0]));
        }
    }

    #[test]
    fn change_from_onset_peaks_at_apex() {
        let spec = SynthSpec { n_subjects: 2, clips_per_subject: 3, ..SynthSpec::default() };
        let ds = generate_synthetic(&spec, 3).unwrap();
        let floor = 4.0 * (spec.noise_sigma as f32).powi(2);
        for s in &ds.samples {
            let onset = &s.frames[s.onset_idx];
            let energy: Vec<f32> = s
                .frames
                .iter()
                .map(|f| {
                    f.data().iter().zip(onset.data()).map(|(a, b)| (a - b).powi(2)).sum::<f32>() / f.data().len() as f32
                })
                .collect();
            let apex = s.apex_idx.unwrap();
            let peak = energy.iter().cloned().fold(0.0, f32::max);
            assert!(energy[apex] >= 0.9 * peak, "{energy:?}");
            assert!(energy[s.offset_idx] < floor);
            for t in s.onset_idx..apex {
                assert!(energy[t] <= energy[t + 1] + floor);
            }
            for t in apex..s.offset_idx {
                assert!(energy[t] + floor >= energy[t + 1]);
            }
        }
    }

    #[test]
    fn ground_truth_flow_of_identical_frames_is_zero() {
        let spec = SynthSpec { n_subjects: 1, clips_per_subject: 1, ..SynthSpec::default() };
        let ds = generate_synthetic(&spec, 3).unwrap();
        let t = &ds.truths[0];
        let f = t.ground_truth_flow(0, t.offset, 32, 32);
        assert!(f.as_image().max_abs() < 1e-6);
        let g = t.ground_truth_flow(0, t.apex, 32, 32);
        let (cx, cy) = (t.center.0.round() as usize, t.center.1.round() as usize);
        assert!((g.v(cy, cx) as f64 - t.amplitude * t.direction.1).abs() < 0.1);
    }

    #[test]
    fn written_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_subjects: 2,
            clips_per_subject: 2,
            frames_per_clip: 8,
            image_size: 16,
            ..SynthSpec::default()
        };
        let ds = generate_synthetic(&spec, 4).unwrap();
        let manifest = write_synthetic(&ds, dir.path()).unwrap();
        let m = load_manifest(&manifest, None).unwrap();
        assert_eq!(m.rows.len(), 4);
        for (row, orig) in m.rows.iter().zip(&ds.samples) {
            let s = load_sample(row, &m.labels, 16).unwrap();
            assert_eq!(s.frames.len(), orig.frames.len());
            assert_eq!(s.label, orig.label);
            assert_eq!(s.apex_idx, orig.apex_idx);
            for (a, b) in s.frames.iter().zip(&orig.frames) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
                }
            }
            let resized = load_sample(row, &m.labels, 8).unwrap();
            assert_eq!(resized.frames[0].shape(), (8, 8, 1));
        }
    }

    #[test]
    fn offset_beyond_frames_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_subjects: 1,
            clips_per_subject: 1,
            frames_per_clip: 8,
            image_size: 16,
            ..SynthSpec::default()
        };
        let ds = generate_synthetic(&spec, 4).unwrap();
        let manifest = write_synthetic(&ds, dir.path()).unwrap();
        let m = load_manifest(&manifest, None).unwrap();
        let mut row = m.rows[0].clone();
        row.offset = 35;
        let e = load_sample(&row, &m.labels, 16).unwrap_err();
        assert!(e.to_string().contains("offset out of range"), "{e}");
        row.frames_dir = dir.path().join("nowhere");
        assert!(load_sample(&row, &m.labels, 16).is_err());
    }

    #[test]
    fn spec_validation() {
        let spec = SynthSpec { frames_per_clip: 7, ..SynthSpec::default() };
        assert!(spec.validate(8).is_err());
        assert!(SynthSpec { n_classes: 1, ..SynthSpec::default() }.validate(8).is_err());
        SynthSpec::default().validate(8).unwrap();
    }
}
