//! Synthetic two-domain person data. Identities are clothing colours plus a stripe
//! pattern; each camera applies a fixed colour/illumination transform, and the target
//! domain draws its camera transforms from a different family than the source.

use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{save_dataset, Image, ImageRecord, Split};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyDataSpec {
    pub num_ids_source: usize,
    pub num_ids_target: usize,
    pub cams: usize,
    pub images_per_id_cam: usize,
    /// `(height, width)`.
    pub size: (usize, usize),
    pub seed: u64,
}

impl Default for ToyDataSpec {
    fn default() -> Self {
        ToyDataSpec {
            num_ids_source: 40,
            num_ids_target: 30,
            cams: 4,
            images_per_id_cam: 3,
            size: (64, 32),
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyData {
    /// Labelled source images, all in the train split.
    pub source: Vec<ImageRecord>,
    /// Target images. The first half of the identities form the train split; for the
    /// rest, image 0 of each (identity, camera) is a query and the others are gallery.
    pub target: Vec<ImageRecord>,
}

#[derive(Clone, Copy, Debug)]
struct Appearance {
    top: [f32; 3],
    bottom: [f32; 3],
    stripe: [f32; 3],
    hair: [f32; 3],
    /// 0 for plain clothing.
    stripe_period: usize,
    stripe_vertical: bool,
}

#[derive(Clone, Copy, Debug)]
enum CameraTransform {
    /// `gain * v + offset` per channel.
    Linear { gain: [f32; 3], offset: [f32; 3] },
    /// Domain colour mixing, then contrast, tint and gamma.
    Tonal { mix: f32, contrast: f32, tint: [f32; 3], gamma: f32 },
}

impl CameraTransform {
    fn apply(&self, px: [f32; 3]) -> [f32; 3] {
        match *self {
            CameraTransform::Linear { gain, offset } => {
                [0, 1, 2].map(|c| (gain[c] * px[c] + offset[c]).clamp(0.0, 1.0))
            }
            CameraTransform::Tonal { mix, contrast, tint, gamma } => {
                let mixed = [0, 1, 2].map(|c| (1.0 - mix) * px[c] + mix * px[(c + 1) % 3]);
                [0, 1, 2].map(|c| {
                    let v = (contrast * (mixed[c] - 0.5) + 0.5 + tint[c]).clamp(0.0, 1.0);
                    v.powf(gamma)
                })
            }
        }
    }
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    hsv(rng.random::<f32>(), rng.random_range(0.45..1.0), rng.random_range(0.35..1.0))
}

fn appearance(rng: &mut ChaCha8Rng) -> Appearance {
    Appearance {
        top: random_color(rng),
        bottom: random_color(rng),
        stripe: random_color(rng),
        hair: hsv(rng.random_range(0.0..0.12), rng.random_range(0.3..0.8), rng.random_range(0.1..0.5)),
        stripe_period: [0, 2, 3, 4][rng.random_range(0..4)],
        stripe_vertical: rng.random_bool(0.5),
    }
}

fn source_camera(rng: &mut ChaCha8Rng) -> CameraTransform {
    CameraTransform::Linear {
        gain: [0; 3].map(|_| rng.random_range(0.8..1.2)),
        offset: [0; 3].map(|_| rng.random_range(-0.06..0.06)),
    }
}

fn target_camera(rng: &mut ChaCha8Rng, domain_mix: f32) -> CameraTransform {
    CameraTransform::Tonal {
        mix: domain_mix,
        contrast: rng.random_range(0.7..0.9),
        tint: [0; 3].map(|_| rng.random_range(-0.06..0.06)),
        gamma: rng.random_range(0.8..1.25),
    }
}

const SKIN: [f32; 3] = [0.86, 0.7, 0.58];

/// Draws one pedestrian image with pose, background and lighting jitter.
fn render(app: &Appearance, cam: &CameraTransform, (h, w): (usize, usize), rng: &mut ChaCha8Rng) -> Image {
    let noise = Normal::new(0.0f32, 0.02).expect("valid std");
    let bg_level: f32 = rng.random_range(0.4..0.6);
    let bg = [0; 3].map(|_| (bg_level + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0));
    let light: f32 = rng.random_range(0.9..1.1);
    let dy = rng.random_range(-1..=1) * h as i64 / 64;
    let dx = rng.random_range(-1..=1) * w as i64 / 32;
    let fy = |f: f64| ((f * h as f64) as i64 + dy).clamp(0, h as i64) as usize;
    let cx = w as i64 / 2 + dx;
    let half = ((0.28 * w as f64).round() as i64).max(1);
    let (x0, x1) = ((cx - half).max(0) as usize, ((cx + half).min(w as i64)) as usize);
    let head_half = (half / 2).max(1);
    let (hx0, hx1) = ((cx - head_half).max(0) as usize, ((cx + head_half).min(w as i64)) as usize);
    let (head0, hair1, head1, torso1, legs1) = (fy(0.04), fy(0.08), fy(0.17), fy(0.55), fy(0.95));
    let leg_gap = (cx.max(0) as usize).min(w.saturating_sub(1));

    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let mut px = bg;
            if (head0..head1).contains(&y) && (hx0..hx1).contains(&x) {
                px = if y < hair1 { app.hair } else { SKIN };
            } else if (head1..torso1).contains(&y) && (x0..x1).contains(&x) {
                px = app.top;
                let t = if app.stripe_vertical { x - x0 } else { y - head1 };
                if t.checked_div(app.stripe_period).is_some_and(|band| band % 2 == 1) {
                    px = app.stripe;
                }
            } else if (torso1..legs1).contains(&y) && (x0..x1).contains(&x) && x != leg_gap {
                px = app.bottom;
            }
            let px = cam.apply(px.map(|v| v * light));
            data.extend(px.map(|v| (v + noise.sample(rng)).clamp(0.0, 1.0)));
        }
    }
    Image::new(h, w, data).expect("h*w*3 values").quantized()
}

pub fn make_toy_data(spec: &ToyDataSpec) -> Result<ToyData> {
    let ToyDataSpec {
        num_ids_source,
        num_ids_target,
        cams,
        images_per_id_cam,
        size,
        seed,
    } = *spec;
    if [num_ids_source, num_ids_target, cams, images_per_id_cam, size.0, size.1].contains(&0) {
        return Err(Error::InvalidConfig(format!("toy data counts must be >= 1: {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source_cams: Vec<CameraTransform> = (0..cams).map(|_| source_camera(&mut rng)).collect();
    let domain_mix = rng.random_range(0.15..0.3);
    let target_cams: Vec<CameraTransform> = (0..cams).map(|_| target_camera(&mut rng, domain_mix)).collect();
    let source_apps: Vec<Appearance> = (0..num_ids_source).map(|_| appearance(&mut rng)).collect();
    let target_apps: Vec<Appearance> = (0..num_ids_target).map(|_| appearance(&mut rng)).collect();

    let mut source = Vec::with_capacity(num_ids_source * cams * images_per_id_cam);
    for (id, app) in source_apps.iter().enumerate() {
        for (cam, t) in source_cams.iter().enumerate() {
            for k in 0..images_per_id_cam {
                let img = render(app, t, size, &mut rng);
                source.push(ImageRecord::new(format!("s{id:03}_c{cam}_{k}"), img, Some(id), cam, Split::Train));
            }
        }
    }
    // Target identities are numbered after the source ones so the pools never overlap.
    let train_ids = num_ids_target.div_ceil(2);
    let mut target = Vec::with_capacity(num_ids_target * cams * images_per_id_cam);
    for (local, app) in target_apps.iter().enumerate() {
        let id = num_ids_source + local;
        for (cam, t) in target_cams.iter().enumerate() {
            for k in 0..images_per_id_cam {
                let img = render(app, t, size, &mut rng);
                let split = if local < train_ids {
                    Split::Train
                } else if k == 0 {
                    Split::Query
                } else {
                    Split::Gallery
                };
                target.push(ImageRecord::new(format!("t{id:03}_c{cam}_{k}"), img, Some(id), cam, split));
            }
        }
    }
    Ok(ToyData { source, target })
}

/// Writes `<dir>/source/manifest.tsv` and `<dir>/target/manifest.tsv` with their images.
pub fn write_toy_data(dir: &Path, data: &ToyData) -> Result<(PathBuf, PathBuf)> {
    Ok((
        save_dataset(&dir.join("source"), &data.source)?,
        save_dataset(&dir.join("target"), &data.target)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{load_dataset, records_in_split};
    use std::collections::BTreeSet;

    fn small() -> ToyDataSpec {
        ToyDataSpec {
            num_ids_source: 4,
            num_ids_target: 4,
            cams: 2,
            images_per_id_cam: 3,
            size: (16, 8),
            seed: 3,
        }
    }

    #[test]
    fn default_counts() {
        let d = make_toy_data(&ToyDataSpec::default()).unwrap();
        assert_eq!(d.source.len(), 480);
        assert_eq!(d.target.len(), 360);
        let ids = |r: &[ImageRecord]| r.iter().map(|x| x.identity.unwrap()).collect::<BTreeSet<_>>();
        assert_eq!(ids(&d.source).len(), 40);
        assert_eq!(ids(&d.target).len(), 30);
        assert!(ids(&d.source).is_disjoint(&ids(&d.target)));
        assert_eq!(records_in_split(&d.target, Split::Train).len(), 180);
        assert_eq!(records_in_split(&d.target, Split::Query).len(), 60);
        assert_eq!(records_in_split(&d.target, Split::Gallery).len(), 120);
        assert!(d.source.iter().all(|r| r.pixels.height() == 64 && r.pixels.width() == 32));
    }

    #[test]
    fn deterministic_and_png_stable() {
        let a = make_toy_data(&small()).unwrap();
        assert_eq!(a, make_toy_data(&small()).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let (src, tgt) = write_toy_data(dir.path(), &a).unwrap();
        assert_eq!(load_dataset(&src).unwrap(), a.source);
        assert_eq!(load_dataset(&tgt).unwrap(), a.target);
        let other = make_toy_data(&ToyDataSpec { seed: 4, ..small() }).unwrap();
        assert_ne!(a.source[0].pixels, other.source[0].pixels);
    }

    #[test]
    fn zero_counts_rejected() {
        assert!(make_toy_data(&ToyDataSpec { cams: 0, ..small() }).is_err());
    }
}
