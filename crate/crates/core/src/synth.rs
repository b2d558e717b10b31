//! Synthetic multi-camera pedestrian clips.
//!
//! Each identity owns a template: two clothing colours (upper/lower body)
//! overlaid with a few Gaussian colour blobs. A frame is the template shifted
//! by up to `jitter_pixels`, tinted by its camera, corrupted with Gaussian
//! noise and optionally a random occluding rectangle.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_tensors, write_tensors};
use crate::error::{Error, Result};
use crate::kernels::map_range;
use crate::model::ClipBatch;
use crate::tensor::{Scalar, Tensor};

pub const LABELS: &str = "labels.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_ids: usize,
    pub clips_per_id: usize,
    pub frames_per_clip: usize,
    /// `[C, H, W]`
    pub image: [usize; 3],
    pub cameras: usize,
    pub noise_std: f64,
    pub occlusion_prob: f64,
    pub jitter_pixels: usize,
    /// Standard deviation of the per-camera colour offset.
    pub camera_shift: f64,
    pub blobs: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_ids: 20,
            clips_per_id: 4,
            frames_per_clip: 8,
            image: [3, 64, 32],
            cameras: 2,
            noise_std: 0.3,
            occlusion_prob: 0.2,
            jitter_pixels: 2,
            camera_shift: 0.3,
            blobs: 4,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.num_ids < 2 {
            return cfg(format!("num_ids = {} (need ≥ 2)", self.num_ids));
        }
        if self.frames_per_clip == 0 || self.clips_per_id == 0 || self.cameras == 0 {
            return cfg("frames_per_clip, clips_per_id and cameras must be positive".into());
        }
        if self.image.contains(&0) {
            return cfg(format!("degenerate image shape {:?}", self.image));
        }
        if !(self.noise_std >= 0.0) || !(self.camera_shift >= 0.0) {
            return cfg("noise_std and camera_shift must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return cfg(format!("occlusion_prob = {} outside [0, 1]", self.occlusion_prob));
        }
        Ok(())
    }

    fn frame_len(&self) -> usize {
        self.image.iter().product()
    }
}

/// Clips `[n, frames_per_clip, C, H, W]` with identity and camera labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub frames: Tensor<f32>,
    pub ids: Vec<usize>,
    pub cams: Vec<usize>,
}

/// Stream 0 holds the templates and camera tints; clip `i` uses stream `i + 1`.
fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s);
    r
}

pub fn templates(spec: &SynthSpec) -> Result<Vec<Vec<f32>>> {
    spec.validate()?;
    let mut rng = stream(spec.seed, 0);
    Ok((0..spec.num_ids).map(|_| template(spec, &mut rng)).collect())
}

fn template(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let [c, h, w] = spec.image;
    let upper: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let lower: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let split = rng.random_range(0.4..0.6) * h as f64;
    let blobs: Vec<(f64, f64, f64, f64, Vec<f64>)> = (0..spec.blobs)
        .map(|_| {
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let sy = rng.random_range(0.06..0.2) * h as f64;
            let sx = rng.random_range(0.1..0.3) * w as f64;
            let col = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            (cy, cx, sy, sx, col)
        })
        .collect();
    let mut out = vec![0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut v = if (y as f64) < split { upper[ch] } else { lower[ch] };
                for (cy, cx, sy, sx, col) in &blobs {
                    let dy = (y as f64 - cy) / sy;
                    let dx = (x as f64 - cx) / sx;
                    v += col[ch] * (-0.5 * (dy * dy + dx * dx)).exp();
                }
                out[(ch * h + y) * w + x] = v as f32;
            }
        }
    }
    out
}

pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let [c, h, w] = spec.image;
    let mut rng = stream(spec.seed, 0);
    let tmpl: Vec<Vec<f32>> = (0..spec.num_ids).map(|_| template(spec, &mut rng)).collect();
    let shift_dist = Normal::new(0.0, spec.camera_shift.max(f64::MIN_POSITIVE)).expect("finite std");
    let tints: Vec<Vec<f64>> = (0..spec.cameras)
        .map(|_| (0..c).map(|_| if spec.camera_shift > 0.0 { shift_dist.sample(&mut rng) } else { 0.0 }).collect())
        .collect();
    let n = spec.num_ids * spec.clips_per_id;
    let ids: Vec<usize> = (0..n).map(|i| i / spec.clips_per_id).collect();
    let cams: Vec<usize> = (0..n).map(|i| (i % spec.clips_per_id) % spec.cameras).collect();
    let fl = spec.frame_len();
    let clips = map_range(n, |i| {
        let mut rng = stream(spec.seed, i as u64 + 1);
        let noise = Normal::new(0.0, spec.noise_std).expect("validated std");
        let (t, tint) = (&tmpl[ids[i]], &tints[cams[i]]);
        let mut clip = Vec::with_capacity(spec.frames_per_clip * fl);
        for _ in 0..spec.frames_per_clip {
            let j = spec.jitter_pixels as i64;
            let (dy, dx) = (rng.random_range(-j..=j), rng.random_range(-j..=j));
            let occ = (rng.random::<f64>() < spec.occlusion_prob).then(|| {
                let oh = rng.random_range(h / 4..=h / 2).max(1);
                let ow = rng.random_range(w / 4..=w / 2).max(1);
                (rng.random_range(0..=h - oh), rng.random_range(0..=w - ow), oh, ow)
            });
            for ch in 0..c {
                for y in 0..h {
                    let sy = (y as i64 - dy).clamp(0, h as i64 - 1) as usize;
                    for x in 0..w {
                        let sx = (x as i64 - dx).clamp(0, w as i64 - 1) as usize;
                        let mut v = t[(ch * h + sy) * w + sx] as f64 + tint[ch];
                        if spec.noise_std > 0.0 {
                            v += noise.sample(&mut rng);
                        }
                        if let Some((oy, ox, oh, ow)) = occ {
                            if (oy..oy + oh).contains(&y) && (ox..ox + ow).contains(&x) {
                                v = 0.0;
                            }
                        }
                        clip.push(v as f32);
                    }
                }
            }
        }
        clip
    });
    let frames = Tensor::new(&[n, spec.frames_per_clip, c, h, w], clips.concat())?;
    Ok(SynthDataset { spec: spec.clone(), frames, ids, cams })
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn clip(&self, i: usize) -> &[f32] {
        let per = self.spec.frames_per_clip * self.spec.frame_len();
        &self.frames.data()[i * per..(i + 1) * per]
    }

    /// Clips `[len(indices), t, C, H, W]` made of the chosen frames of each
    /// clip. `frames[k]` lists the frame indices for `indices[k]`.
    pub fn gather<T: Scalar>(&self, indices: &[usize], frames: &[Vec<usize>]) -> Result<ClipBatch<T>> {
        let t = frames.first().map_or(0, Vec::len);
        if frames.len() != indices.len() || frames.iter().any(|f| f.len() != t) || t == 0 {
            return Err(Error::Input("every clip needs the same positive number of frames".into()));
        }
        let fl = self.spec.frame_len();
        let mut data = Vec::with_capacity(indices.len() * t * fl);
        for (&i, fr) in indices.iter().zip(frames) {
            if i >= self.len() {
                return Err(Error::Input(format!("clip index {i} out of range ({} clips)", self.len())));
            }
            let clip = self.clip(i);
            for &f in fr {
                if f >= self.spec.frames_per_clip {
                    return Err(Error::Input(format!("frame {f} out of range ({} per clip)", self.spec.frames_per_clip)));
                }
                data.extend(clip[f * fl..(f + 1) * fl].iter().map(|&v| T::from_f64(v as f64)));
            }
        }
        let [c, h, w] = self.spec.image;
        let frames = Tensor::new(&[indices.len(), t, c, h, w], data)?;
        ClipBatch::new(frames, indices.iter().map(|&i| self.ids[i]).collect(), indices.iter().map(|&i| self.cams[i]).collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_tensors(dir, &[("frames".to_string(), &self.frames)])?;
        let mut labels = String::from("clip\tidentity\tcamera\n");
        for (i, (id, cam)) in self.ids.iter().zip(&self.cams).enumerate() {
            labels.push_str(&format!("{i}\t{id}\t{cam}\n"));
        }
        fs::write(dir.join(LABELS), labels)?;
        Ok(())
    }

    /// Reads frames and labels; `spec` supplies the generation metadata.
    pub fn load(dir: &Path, spec: &SynthSpec) -> Result<Self> {
        let frames = read_tensors::<f32>(dir)?
            .into_iter()
            .find(|(n, _)| n == "frames")
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Dataset("archive has no frames tensor".into()))?;
        let text = fs::read_to_string(dir.join(LABELS))?;
        let mut ids = Vec::new();
        let mut cams = Vec::new();
        for (no, line) in text.lines().enumerate().skip(1) {
            let f: Vec<usize> = line
                .split('\t')
                .map(|s| s.parse().map_err(|e| Error::Dataset(format!("{LABELS} line {}: {e}", no + 1))))
                .collect::<Result<_>>()?;
            if f.len() != 3 || f[0] != ids.len() {
                return Err(Error::Dataset(format!("{LABELS} line {}: malformed record", no + 1)));
            }
            ids.push(f[1]);
            cams.push(f[2]);
        }
        let s = frames.shape();
        if s.len() != 5 || s[0] != ids.len() || s[1] != spec.frames_per_clip || s[2..] != spec.image {
            return Err(Error::Dataset(format!("frames {s:?} disagree with labels/spec")));
        }
        Ok(Self { spec: spec.clone(), frames, ids, cams })
    }
}

/// Clip indices of a subset with their labels.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Subset {
    pub indices: Vec<usize>,
    pub ids: Vec<usize>,
    pub cams: Vec<usize>,
}

impl Subset {
    fn from(ds: &SynthDataset, indices: Vec<usize>) -> Self {
        let ids = indices.iter().map(|&i| ds.ids[i]).collect();
        let cams = indices.iter().map(|&i| ds.cams[i]).collect();
        Self { indices, ids, cams }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Subset,
    pub query: Subset,
    pub gallery: Subset,
    /// Training identities in ascending order; classifier label = position.
    pub train_ids: Vec<usize>,
}

impl Split {
    pub fn train_label(&self, id: usize) -> Option<usize> {
        self.train_ids.binary_search(&id).ok()
    }
}

/// Disjoint identity split (first `round(train_fraction · n)` identities
/// train); test queries are camera-0 clips, the gallery the other cameras.
pub fn split(ds: &SynthDataset, train_fraction: f64) -> Result<Split> {
    if ds.spec.cameras < 2 {
        return Err(Error::Dataset("cross-camera split needs at least two cameras".into()));
    }
    let all: BTreeSet<usize> = ds.ids.iter().copied().collect();
    let n_train = (train_fraction * all.len() as f64).round() as usize;
    if n_train == 0 || n_train >= all.len() {
        return Err(Error::Dataset(format!("{} identities cannot be split with fraction {train_fraction}", all.len())));
    }
    let train_ids: Vec<usize> = all.iter().copied().take(n_train).collect();
    let is_train = |id: usize| train_ids.binary_search(&id).is_ok();
    let train = (0..ds.len()).filter(|&i| is_train(ds.ids[i])).collect();
    let query: Vec<usize> = (0..ds.len()).filter(|&i| !is_train(ds.ids[i]) && ds.cams[i] == 0).collect();
    let gallery: Vec<usize> = (0..ds.len()).filter(|&i| !is_train(ds.ids[i]) && ds.cams[i] != 0).collect();
    let gallery_ids: BTreeSet<usize> = gallery.iter().map(|&i| ds.ids[i]).collect();
    if let Some(&q) = query.iter().find(|&&q| !gallery_ids.contains(&ds.ids[q])) {
        return Err(Error::Dataset(format!("query clip {q} has no cross-camera match in the gallery")));
    }
    if query.is_empty() {
        return Err(Error::Dataset("no query clips".into()));
    }
    Ok(Split { train: Subset::from(ds, train), query: Subset::from(ds, query), gallery: Subset::from(ds, gallery), train_ids })
}

/// `t` distinct frames in ascending order (with repeats when the clip is
/// shorter than `t`).
pub fn random_frames<R: Rng + ?Sized>(frames_per_clip: usize, t: usize, rng: &mut R) -> Vec<usize> {
    if frames_per_clip >= t {
        let mut v = sample(rng, frames_per_clip, t).into_vec();
        v.sort_unstable();
        v
    } else {
        let mut v: Vec<usize> = (0..t).map(|_| rng.random_range(0..frames_per_clip)).collect();
        v.sort_unstable();
        v
    }
}

/// `t` evenly spaced frames: `⌊j·F/t⌋` for `j = 0..t`.
pub fn even_frames(frames_per_clip: usize, t: usize) -> Vec<usize> {
    (0..t).map(|j| j * frames_per_clip / t).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec { num_ids: 6, clips_per_id: 4, frames_per_clip: 3, image: [3, 16, 8], ..Default::default() }
    }

    #[test]
    fn clean_frames_are_identical_within_camera() {
        let spec = SynthSpec { noise_std: 0.0, jitter_pixels: 0, occlusion_prob: 0.0, ..small() };
        let ds = generate(&spec).unwrap();
        let fl = 3 * 16 * 8;
        let a = ds.clip(0);
        let b = ds.clip(2); // same identity, same camera
        assert_eq!(&a[..fl], &a[fl..2 * fl]);
        assert_eq!(a, b);
        assert_ne!(ds.clip(0), ds.clip(1)); // other camera tint
    }

    #[test]
    fn deterministic_under_seed() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = generate(&SynthSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(other.frames, generate(&small()).unwrap().frames);
    }

    #[test]
    fn templates_are_well_separated() {
        for seed in 0..100 {
            let spec = SynthSpec { seed, ..Default::default() };
            let t = templates(&spec).unwrap();
            let mut min = f64::INFINITY;
            for i in 0..t.len() {
                for j in i + 1..t.len() {
                    let d: f64 = t[i].iter().zip(&t[j]).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
                    min = min.min(d);
                }
            }
            assert!(min > 10.0 * spec.noise_std, "seed {seed}: {min}");
        }
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        for bad in [
            SynthSpec { num_ids: 1, ..small() },
            SynthSpec { frames_per_clip: 0, ..small() },
            SynthSpec { image: [3, 0, 8], ..small() },
            SynthSpec { noise_std: -1.0, ..small() },
        ] {
            assert!(matches!(generate(&bad), Err(Error::Config(_))));
        }
    }

    #[test]
    fn split_contract() {
        let ds = generate(&SynthSpec { num_ids: 10, ..small() }).unwrap();
        let s = split(&ds, 0.5).unwrap();
        assert_eq!(s.train_ids.len(), 5);
        let test_ids: BTreeSet<usize> = s.query.ids.iter().chain(&s.gallery.ids).copied().collect();
        assert_eq!(test_ids.len(), 5);
        assert!(s.train_ids.iter().all(|id| !test_ids.contains(id)));
        let q: BTreeSet<_> = s.query.indices.iter().collect();
        assert!(s.gallery.indices.iter().all(|g| !q.contains(g)));
        assert!(s.query.cams.iter().all(|&c| c == 0) && s.gallery.cams.iter().all(|&c| c != 0));
        for id in &s.query.ids {
            assert!(s.gallery.ids.contains(id));
        }
        assert_eq!(s.train_label(s.train_ids[3]), Some(3));
        let one_cam = generate(&SynthSpec { cameras: 1, ..small() }).unwrap();
        assert!(matches!(split(&one_cam, 0.5), Err(Error::Dataset(_))));
        assert!(matches!(split(&ds, 0.0), Err(Error::Dataset(_))));
    }

    #[test]
    fn persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small()).unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(SynthDataset::load(dir.path(), &small()).unwrap(), ds);
        let header = fs::read_to_string(dir.path().join(LABELS)).unwrap();
        assert_eq!(header.lines().nth(2).unwrap(), "1\t0\t1");
    }

    #[test]
    fn frame_selection() {
        assert_eq!(even_frames(8, 4), vec![0, 2, 4, 6]);
        assert_eq!(even_frames(3, 3), vec![0, 1, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = random_frames(8, 4, &mut rng);
        assert_eq!(f.len(), 4);
        assert!(f.windows(2).all(|w| w[0] < w[1]));
        let ds = generate(&small()).unwrap();
        let b = ds.gather::<f32>(&[0, 5], &[vec![0, 2], vec![1, 1]]).unwrap();
        assert_eq!(b.frames.shape(), &[2, 2, 3, 16, 8]);
        assert_eq!(b.ids, vec![0, 1]);
        assert!(matches!(ds.gather::<f32>(&[99], &[vec![0]]), Err(Error::Input(_))));
    }
}
