//! Camera-aware style transfer: CycleGAN objective values, the built-in deterministic
//! translator, and assembly of the full source training set.

use crate::datamodel::{Image, ImageRecord, Split};
use crate::error::{Error, Result};

/// Number of directed translation models needed for `cameras` camera styles.
pub fn count_style_models(cameras: usize) -> usize {
    cameras * cameras.saturating_sub(1)
}

pub type ImageFn<'a> = Box<dyn Fn(&Image) -> Image + Send + Sync + 'a>;

/// A pair of mappings between two camera styles: `forward` is X -> Y, `backward` is Y -> X.
pub struct TranslatorHandle<'a> {
    pub forward: ImageFn<'a>,
    pub backward: ImageFn<'a>,
    pub pair: (usize, usize),
}

impl<'a> TranslatorHandle<'a> {
    /// The built-in translators for `(a -> b, b -> a)`.
    pub fn builtin(camera_a: usize, camera_b: usize) -> TranslatorHandle<'static> {
        TranslatorHandle {
            forward: builtin_style_fn(camera_a, camera_b),
            backward: builtin_style_fn(camera_b, camera_a),
            pair: (camera_a, camera_b),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanLossReport {
    /// Generator side of the least-squares adversarial term for G (X -> Y).
    pub loss_gan_g: f64,
    /// Generator side of the least-squares adversarial term for F (Y -> X).
    pub loss_gan_f: f64,
    pub loss_cycle: f64,
    pub loss_identity: f64,
    pub loss_cyclegan_total: f64,
    pub loss_total: f64,
    pub lambda_cyc: f64,
    /// `mean (D_Y(y) - 1)^2 + mean D_Y(G(x))^2`.
    pub loss_disc_y: f64,
    /// `mean (D_X(x) - 1)^2 + mean D_X(F(y))^2`.
    pub loss_disc_x: f64,
}

pub const DEFAULT_LAMBDA_CYC: f64 = 10.0;

fn mean_l1(a: &Image, b: &Image) -> f64 {
    let n = a.data().len().max(1) as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| f64::from((x - y).abs()))
        .sum::<f64>()
        / n
}

fn checked_disc(d: &dyn Fn(&Image) -> f64, img: &Image) -> Result<f64> {
    let v = d(img);
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(Error::DiscriminatorRange(v))
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Evaluates the CycleGAN + identity-mapping objective on two batches without
/// updating anything. Adversarial terms use the least-squares form.
#[allow(clippy::too_many_arguments)]
pub fn cyclegan_losses(
    g: &dyn Fn(&Image) -> Image,
    f: &dyn Fn(&Image) -> Image,
    d_x: &dyn Fn(&Image) -> f64,
    d_y: &dyn Fn(&Image) -> f64,
    batch_x: &[Image],
    batch_y: &[Image],
    lambda_cyc: f64,
) -> Result<GanLossReport> {
    if batch_x.is_empty() || batch_y.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let gx: Vec<Image> = batch_x.iter().map(g).collect();
    let fy: Vec<Image> = batch_y.iter().map(f).collect();

    let mut d_y_fake = Vec::with_capacity(gx.len());
    for img in &gx {
        d_y_fake.push(checked_disc(d_y, img)?);
    }
    let mut d_x_fake = Vec::with_capacity(fy.len());
    for img in &fy {
        d_x_fake.push(checked_disc(d_x, img)?);
    }
    let mut d_y_real = Vec::with_capacity(batch_y.len());
    for img in batch_y {
        d_y_real.push(checked_disc(d_y, img)?);
    }
    let mut d_x_real = Vec::with_capacity(batch_x.len());
    for img in batch_x {
        d_x_real.push(checked_disc(d_x, img)?);
    }

    let loss_gan_g = mean(d_y_fake.iter().map(|d| (d - 1.0).powi(2)));
    let loss_gan_f = mean(d_x_fake.iter().map(|d| (d - 1.0).powi(2)));
    let loss_disc_y = mean(d_y_real.iter().map(|d| (d - 1.0).powi(2)))
        + mean(d_y_fake.iter().map(|d| d * d));
    let loss_disc_x = mean(d_x_real.iter().map(|d| (d - 1.0).powi(2)))
        + mean(d_x_fake.iter().map(|d| d * d));

    let cycle_x = mean(batch_x.iter().zip(&gx).map(|(x, gx)| mean_l1(&f(gx), x)));
    let cycle_y = mean(batch_y.iter().zip(&fy).map(|(y, fy)| mean_l1(&g(fy), y)));
    let loss_cycle = cycle_x + cycle_y;

    let ident_g = mean(batch_y.iter().map(|y| mean_l1(&g(y), y)));
    let ident_f = mean(batch_x.iter().map(|x| mean_l1(&f(x), x)));
    let loss_identity = ident_g + ident_f;

    let loss_cyclegan_total = loss_gan_g + loss_gan_f + lambda_cyc * loss_cycle;
    Ok(GanLossReport {
        loss_gan_g,
        loss_gan_f,
        loss_cycle,
        loss_identity,
        loss_cyclegan_total,
        loss_total: loss_cyclegan_total + loss_identity,
        lambda_cyc,
        loss_disc_y,
        loss_disc_x,
    })
}

/// Per-channel affine color map `clip(gain * v + offset, 0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorTransform {
    pub gain: [f32; 3],
    pub offset: [f32; 3],
}

impl ColorTransform {
    pub const IDENTITY: ColorTransform = ColorTransform {
        gain: [1.0; 3],
        offset: [0.0; 3],
    };

    pub fn apply(&self, image: &Image) -> Image {
        let mut out = image.clone();
        let ch = out.channels();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % ch;
            if c < 3 {
                *v = (self.gain[c] * *v + self.offset[c]).clamp(0.0, 1.0);
            }
        }
        out
    }
}

// Per-camera style signatures; cameras beyond the table reuse it with a larger magnitude.
const CAMERA_SIGNATURES: [[i8; 3]; 6] = [
    [0, 0, 0],
    [1, -1, 0],
    [0, 1, -1],
    [-1, 0, 1],
    [1, 0, -1],
    [-1, 1, 0],
];

fn signature(camera: usize) -> [f32; 3] {
    let base = CAMERA_SIGNATURES[camera % CAMERA_SIGNATURES.len()];
    let scale = 1.0 + (camera / CAMERA_SIGNATURES.len()) as f32 * 0.5;
    base.map(|s| f32::from(s) * scale)
}

/// The color transform the built-in translator applies for `src -> dst`.
pub fn builtin_color_transform(cam_src: usize, cam_dst: usize) -> ColorTransform {
    if cam_src == cam_dst {
        return ColorTransform::IDENTITY;
    }
    let (s, d) = (signature(cam_src), signature(cam_dst));
    let mut t = ColorTransform::IDENTITY;
    for c in 0..3 {
        let delta = d[c] - s[c];
        t.gain[c] = 1.0 + 0.1 * delta;
        // The source term keeps pairs with equal signature deltas apart.
        t.offset[c] = 0.02 * delta + 0.01 * s[c];
    }
    t
}

/// Deterministic stand-in for a trained `src -> dst` camera-style generator.
pub fn builtin_style_fn(cam_src: usize, cam_dst: usize) -> ImageFn<'static> {
    if cam_src == cam_dst {
        return Box::new(|img: &Image| img.clone());
    }
    let t = builtin_color_transform(cam_src, cam_dst);
    Box::new(move |img: &Image| t.apply(img))
}

/// `translator(image, cam_src, cam_dst)` re-renders an image in another camera's style.
pub type StyleTranslator<'a> = dyn Fn(&Image, usize, usize) -> Image + 'a;

pub fn builtin_translator(image: &Image, cam_src: usize, cam_dst: usize) -> Image {
    builtin_color_transform(cam_src, cam_dst).apply(image)
}

/// Merges train and test splits into one training set and adds, for every real image,
/// one styled copy per other camera. Styled copies keep the identity of their original
/// and carry `style_source_camera`; their `camera_id` is the style they imitate.
pub fn assemble_full_training_set(
    source: &[ImageRecord],
    num_cameras: usize,
    translator: &StyleTranslator<'_>,
) -> Result<Vec<ImageRecord>> {
    if num_cameras == 0 {
        return Err(Error::InvalidConfig("at least one camera is required".into()));
    }
    let mut out = Vec::with_capacity(source.len() * num_cameras);
    for r in source {
        if r.identity.is_none() {
            return Err(Error::MissingIdentity(r.image_id.clone()));
        }
        if r.camera_id >= num_cameras {
            return Err(Error::UnknownCamera {
                image_id: r.image_id.clone(),
                camera: r.camera_id,
                num_cameras,
            });
        }
        let mut real = r.clone();
        real.split = Split::Train;
        real.style_source_camera = None;
        out.push(real);
    }
    let n_real = out.len();
    for i in 0..n_real {
        let src_cam = out[i].camera_id;
        for dst in (0..num_cameras).filter(|&c| c != src_cam) {
            let real = &out[i];
            let pixels = translator(&real.pixels, src_cam, dst);
            let styled = ImageRecord {
                image_id: format!("{}_c{}to{}", real.image_id, src_cam, dst),
                pixels,
                identity: real.identity,
                camera_id: dst,
                split: Split::Train,
                style_source_camera: Some(src_cam),
                is_flipped: false,
            };
            out.push(styled);
        }
    }
    Ok(out)
}
