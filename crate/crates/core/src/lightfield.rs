//! Multi-view sub-aperture (SA) arrays: container I/O, vignetting masks,
//! procedural synthesis and crop/resize.
//!
//! Grid positions are `(u, v)` with `u` the row (vertical view offset) and
//! `v` the column (horizontal view offset). Pixels are interleaved 8-bit RGB.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiViewSAArray {
    pub image_id: String,
    pub views_u: usize,
    pub views_v: usize,
    pub width: usize,
    pub height: usize,
    valid_mask: Vec<bool>,
    views: Vec<Option<Vec<u8>>>,
}

impl MultiViewSAArray {
    /// Builds an array from per-position pixel buffers (`None` for vignetted
    /// positions). The mask is derived from which positions carry pixels.
    pub fn new(
        image_id: impl Into<String>,
        views_u: usize,
        views_v: usize,
        width: usize,
        height: usize,
        views: Vec<Option<Vec<u8>>>,
    ) -> Result<Self> {
        if views_u == 0 || views_v == 0 || width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "light field dims {views_u}x{views_v} views of {width}x{height} px"
            )));
        }
        if views.len() != views_u * views_v {
            return Err(Error::shape(
                "MultiViewSAArray::new",
                format!("{views_u}x{views_v} grid"),
                format!("{} views", views.len()),
            ));
        }
        let want = width * height * CHANNELS;
        for (i, view) in views.iter().enumerate() {
            if let Some(px) = view {
                if px.len() != want {
                    return Err(Error::shape(
                        "MultiViewSAArray::new",
                        format!("view ({}, {}) {} bytes", i / views_v, i % views_v, px.len()),
                        format!("{want} bytes"),
                    ));
                }
            }
        }
        let valid_mask = views.iter().map(Option::is_some).collect();
        Ok(MultiViewSAArray {
            image_id: image_id.into(),
            views_u,
            views_v,
            width,
            height,
            valid_mask,
            views,
        })
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid_mask
    }

    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        u < self.views_u && v < self.views_v && self.valid_mask[u * self.views_v + v]
    }

    pub fn valid_count(&self) -> usize {
        self.valid_mask.iter().filter(|&&b| b).count()
    }

    /// Pixels of a valid view, `None` when vignetted or out of the grid.
    pub fn view(&self, u: usize, v: usize) -> Option<&[u8]> {
        if u >= self.views_u || v >= self.views_v {
            return None;
        }
        self.views[u * self.views_v + v].as_deref()
    }

    pub fn pixel(&self, u: usize, v: usize, x: usize, y: usize) -> Option<[u8; 3]> {
        let px = self.view(u, v)?;
        let i = (y * self.width + x) * CHANNELS;
        Some([px[i], px[i + 1], px[i + 2]])
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ContainerManifest {
    views_u: usize,
    views_v: usize,
    width: usize,
    height: usize,
    valid_mask: Vec<u8>,
    image_id: String,
}

pub fn view_file_name(u: usize, v: usize) -> String {
    format!("sa_{u:02}_{v:02}.png")
}

pub fn load_sa_container(path: impl AsRef<Path>) -> Result<MultiViewSAArray> {
    let dir = path.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let malformed = |reason: String| Error::MalformedManifest {
        path: manifest_path.clone(),
        reason,
    };
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: ContainerManifest =
        serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    let (nu, nv) = (manifest.views_u, manifest.views_v);
    if nu == 0 || nv == 0 || manifest.width == 0 || manifest.height == 0 {
        return Err(malformed("grid and view dimensions must be >= 1".into()));
    }
    if manifest.valid_mask.len() != nu * nv {
        return Err(malformed(format!(
            "valid_mask has {} entries for a {nu}x{nv} grid",
            manifest.valid_mask.len()
        )));
    }
    if manifest.valid_mask.iter().any(|&b| b > 1) {
        return Err(malformed("valid_mask entries must be 0 or 1".into()));
    }
    let mut views = Vec::with_capacity(nu * nv);
    for u in 0..nu {
        for v in 0..nv {
            if manifest.valid_mask[u * nv + v] == 0 {
                views.push(None);
                continue;
            }
            let file = dir.join(view_file_name(u, v));
            if !file.is_file() {
                return Err(Error::MissingView { path: file, u, v });
            }
            let img = image::open(&file)
                .map_err(|e| Error::Image {
                    path: file.clone(),
                    source: e,
                })?
                .into_rgb8();
            if img.width() as usize != manifest.width || img.height() as usize != manifest.height
            {
                return Err(Error::ViewDimensions {
                    u,
                    v,
                    found_w: img.width(),
                    found_h: img.height(),
                    want_w: manifest.width as u32,
                    want_h: manifest.height as u32,
                });
            }
            views.push(Some(img.into_raw()));
        }
    }
    MultiViewSAArray::new(
        manifest.image_id,
        nu,
        nv,
        manifest.width,
        manifest.height,
        views,
    )
}

pub fn save_sa_container(array: &MultiViewSAArray, path: impl AsRef<Path>) -> Result<()> {
    let dir = path.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = ContainerManifest {
        views_u: array.views_u,
        views_v: array.views_v,
        width: array.width,
        height: array.height,
        valid_mask: array.valid_mask.iter().map(|&b| b as u8).collect(),
        image_id: array.image_id.clone(),
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, serde_json::to_string(&manifest)?)
        .map_err(|e| Error::io(&manifest_path, e))?;
    for u in 0..array.views_u {
        for v in 0..array.views_v {
            let Some(px) = array.view(u, v) else { continue };
            let file: PathBuf = dir.join(view_file_name(u, v));
            image::save_buffer_with_format(
                &file,
                px,
                array.width as u32,
                array.height as u32,
                image::ExtendedColorType::Rgb8,
                image::ImageFormat::Png,
            )
            .map_err(|e| Error::Image { path: file, source: e })?;
        }
    }
    Ok(())
}

/// Row-major validity grid: the three-cell L at each corner is vignetted on
/// grids of at least 5x5; smaller grids are fully valid.
pub fn default_vignette_mask(views_u: usize, views_v: usize) -> Vec<bool> {
    let mut mask = vec![true; views_u * views_v];
    if views_u < 5 || views_v < 5 {
        return mask;
    }
    let (lu, lv) = (views_u - 1, views_v - 1);
    let corners = [(0, 0, 1i64, 1i64), (0, lv, 1, -1), (lu, 0, -1, 1), (lu, lv, -1, -1)];
    for (cu, cv, du, dv) in corners {
        for (ou, ov) in [(0i64, 0i64), (0, 1), (1, 0)] {
            let u = (cu as i64 + ou * du) as usize;
            let v = (cv as i64 + ov * dv) as usize;
            mask[u * views_v + v] = false;
        }
    }
    mask
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    /// Seeds the per-pixel noise stream.
    pub subject_seed: u64,
    /// Selects the procedural texture; equal ids give equal textures.
    pub base_pattern: u64,
    /// Pattern shift in pixels per unit view offset, both axes.
    pub disparity_px_per_view: f64,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDims {
    pub views_u: usize,
    pub views_v: usize,
    pub width: usize,
    pub height: usize,
    /// Defaults to [`default_vignette_mask`].
    pub mask: Option<Vec<bool>>,
}

impl SynthDims {
    pub fn new(views_u: usize, views_v: usize, width: usize, height: usize) -> Self {
        SynthDims {
            views_u,
            views_v,
            width,
            height,
            mask: None,
        }
    }
}

#[derive(Debug, Clone)]
struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: [f64; 3],
}

fn texture(pattern: u64) -> Vec<Wave> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(pattern ^ 0x7465_7874_7572_6500);
    (0..6)
        .map(|_| {
            let wavelength = rng.gen_range(6.0..20.0);
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let f = 1.0 / wavelength;
            Wave {
                fx: f * angle.cos(),
                fy: f * angle.sin(),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
                amp: [
                    rng.gen_range(-30.0..30.0),
                    rng.gen_range(-30.0..30.0),
                    rng.gen_range(-30.0..30.0),
                ],
            }
        })
        .collect()
}

fn texture_value(waves: &[Wave], x: f64, y: f64, channel: usize) -> f64 {
    128.0
        + waves
            .iter()
            .map(|w| w.amp[channel] * (std::f64::consts::TAU * (w.fx * x + w.fy * y) + w.phase).sin())
            .sum::<f64>()
}

/// Renders a procedural light field: the view at offset `(du, dv)` from the
/// grid center shows the base texture translated by `(dv·d, du·d)` pixels
/// in `(x, y)`, plus Gaussian noise.
pub fn synth_lightfield(
    spec: &SyntheticSceneSpec,
    dims: &SynthDims,
    image_id: impl Into<String>,
) -> Result<MultiViewSAArray> {
    let SynthDims {
        views_u,
        views_v,
        width,
        height,
        ..
    } = *dims;
    if views_u == 0 || views_v == 0 || width == 0 || height == 0 {
        return Err(Error::InvalidArgument("synthetic dims must be >= 1".into()));
    }
    if !(spec.noise_sigma >= 0.0) || !spec.disparity_px_per_view.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise sigma {} / disparity {}",
            spec.noise_sigma, spec.disparity_px_per_view
        )));
    }
    let max_offset = (views_u.max(views_v) - 1) / 2;
    let frame = width.min(height);
    if spec.disparity_px_per_view.abs() * max_offset as f64 >= frame as f64 / 4.0 {
        return Err(Error::DisparityTooLarge {
            disparity: spec.disparity_px_per_view,
            max_offset,
            width: frame,
        });
    }
    let mask = dims
        .mask
        .clone()
        .unwrap_or_else(|| default_vignette_mask(views_u, views_v));
    if mask.len() != views_u * views_v {
        return Err(Error::shape(
            "synth_lightfield",
            format!("{views_u}x{views_v} grid"),
            format!("mask of {}", mask.len()),
        ));
    }
    let waves = texture(spec.base_pattern);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.subject_seed);
    let cu = (views_u - 1) as f64 / 2.0;
    let cv = (views_v - 1) as f64 / 2.0;
    let d = spec.disparity_px_per_view;
    let mut views = Vec::with_capacity(views_u * views_v);
    for u in 0..views_u {
        for v in 0..views_v {
            if !mask[u * views_v + v] {
                views.push(None);
                continue;
            }
            let sx = (v as f64 - cv) * d;
            let sy = (u as f64 - cu) * d;
            let mut px = Vec::with_capacity(width * height * CHANNELS);
            for y in 0..height {
                for x in 0..width {
                    for c in 0..CHANNELS {
                        let mut value = texture_value(&waves, x as f64 - sx, y as f64 - sy, c);
                        if spec.noise_sigma > 0.0 {
                            value += noise.sample(&mut rng);
                        }
                        px.push(value.round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
            views.push(Some(px));
        }
    }
    MultiViewSAArray::new(image_id, views_u, views_v, width, height, views)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub left: usize,
    pub top: usize,
    pub width: usize,
    pub height: usize,
}

impl CropBox {
    pub fn full(width: usize, height: usize) -> Self {
        CropBox {
            left: 0,
            top: 0,
            width,
            height,
        }
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.width >= 1
            && self.height >= 1
            && self.left + self.width <= width
            && self.top + self.height <= height
    }
}

/// Bilinear resample of an interleaved RGB region with half-pixel-center
/// mapping `src = (dst + 0.5)·scale − 0.5`, clamped at the borders.
pub fn resize_region(
    pixels: &[u8],
    stride_w: usize,
    region: CropBox,
    target_w: usize,
    target_h: usize,
) -> Vec<u8> {
    let scale_x = region.width as f64 / target_w as f64;
    let scale_y = region.height as f64 / target_h as f64;
    let taps = |dst: usize, scale: f64, len: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    let xs: Vec<_> = (0..target_w).map(|x| taps(x, scale_x, region.width)).collect();
    let mut out = Vec::with_capacity(target_w * target_h * CHANNELS);
    let at = |x: usize, y: usize, c: usize| {
        pixels[((region.top + y) * stride_w + region.left + x) * CHANNELS + c] as f64
    };
    for ty in 0..target_h {
        let (y0, y1, wy) = taps(ty, scale_y, region.height);
        for &(x0, x1, wx) in &xs {
            for c in 0..CHANNELS {
                let top = at(x0, y0, c) * (1.0 - wx) + at(x1, y0, c) * wx;
                let bottom = at(x0, y1, c) * (1.0 - wx) + at(x1, y1, c) * wx;
                let value = top * (1.0 - wy) + bottom * wy;
                out.push(value.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

pub fn crop_and_resize(
    array: &MultiViewSAArray,
    crop: CropBox,
    target_w: usize,
    target_h: usize,
) -> Result<MultiViewSAArray> {
    if !crop.fits(array.width, array.height) {
        return Err(Error::CropOutOfBounds(format!(
            "[{}, {}, {}, {}] in {}x{}",
            crop.left, crop.top, crop.width, crop.height, array.width, array.height
        )));
    }
    if target_w == 0 || target_h == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target {target_w}x{target_h}"
        )));
    }
    let views = array
        .views
        .par_iter()
        .map(|view| {
            view.as_ref()
                .map(|px| resize_region(px, array.width, crop, target_w, target_h))
        })
        .collect();
    MultiViewSAArray::new(
        array.image_id.clone(),
        array.views_u,
        array.views_v,
        target_w,
        target_h,
        views,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(seed: u64, d: f64, noise: f64) -> SyntheticSceneSpec {
        SyntheticSceneSpec {
            subject_seed: seed,
            base_pattern: 3,
            disparity_px_per_view: d,
            noise_sigma: noise,
        }
    }

    #[test]
    fn vignette_counts() {
        let mask = default_vignette_mask(15, 15);
        assert_eq!(mask.iter().filter(|&&b| b).count(), 213);
        for cell in [(0, 0), (0, 1), (1, 0), (0, 14), (0, 13), (1, 14), (14, 0), (13, 0), (14, 1)] {
            assert!(!mask[cell.0 * 15 + cell.1], "{cell:?}");
        }
        assert!(mask[7 * 15]);
        assert!(default_vignette_mask(3, 3).iter().all(|&b| b));
        let mut rotated = mask.clone();
        rotated.reverse();
        assert_eq!(rotated, mask);
    }

    #[test]
    fn synth_zero_disparity_views_identical() {
        let lf = synth_lightfield(&spec(1, 0.0, 0.0), &SynthDims::new(5, 5, 16, 12), "a").unwrap();
        let center = lf.view(2, 2).unwrap();
        for u in 0..5 {
            for v in 0..5 {
                if let Some(px) = lf.view(u, v) {
                    assert_eq!(px, center);
                }
            }
        }
    }

    #[test]
    fn synth_translation_property() {
        let d = 2.0;
        let (w, h) = (24, 20);
        let lf = synth_lightfield(&spec(1, d, 0.0), &SynthDims::new(5, 5, w, h), "a").unwrap();
        for x in 2..w {
            for y in 0..h {
                assert_eq!(lf.pixel(2, 3, x, y), lf.pixel(2, 2, x - 2, y));
                if y >= 2 {
                    assert_eq!(lf.pixel(3, 2, x, y), lf.pixel(2, 2, x, y - 2));
                }
            }
        }
    }

    #[test]
    fn synth_seeded_determinism() {
        let dims = SynthDims::new(3, 3, 8, 8);
        let a = synth_lightfield(&spec(5, 1.0, 4.0), &dims, "x").unwrap();
        let b = synth_lightfield(&spec(5, 1.0, 4.0), &dims, "x").unwrap();
        let c = synth_lightfield(&spec(6, 1.0, 4.0), &dims, "x").unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn synth_rejects_large_disparity() {
        let err = synth_lightfield(&spec(1, 3.0, 0.0), &SynthDims::new(5, 5, 16, 16), "a");
        assert!(matches!(err, Err(Error::DisparityTooLarge { .. })));
    }

    #[test]
    fn crop_identity_and_constant() {
        let lf = synth_lightfield(&spec(1, 0.5, 3.0), &SynthDims::new(3, 3, 10, 7), "a").unwrap();
        let same = crop_and_resize(&lf, CropBox::full(10, 7), 10, 7).unwrap();
        assert_eq!(same, lf);

        let flat = MultiViewSAArray::new("c", 1, 1, 6, 6, vec![Some([40u8, 90, 200].repeat(36))])
            .unwrap();
        for (tw, th) in [(1, 1), (3, 5), (13, 9)] {
            let out = crop_and_resize(&flat, CropBox { left: 1, top: 2, width: 4, height: 3 }, tw, th)
                .unwrap();
            assert!(out.view(0, 0).unwrap().chunks(3).all(|p| p == [40, 90, 200]));
        }
    }

    #[test]
    fn crop_sample_matches_scalar_bilinear() {
        let (w, h) = (9, 7);
        let px: Vec<u8> = (0..w * h * 3).map(|i| ((i * 37) % 251) as u8).collect();
        let lf = MultiViewSAArray::new("b", 1, 1, w, h, vec![Some(px.clone())]).unwrap();
        let crop = CropBox { left: 1, top: 1, width: 7, height: 5 };
        let out = crop_and_resize(&lf, crop, 4, 3).unwrap();
        // target (2, 1): src x = 2.5*1.75-0.5 = 3.875, src y = 1.5*5/3-0.5 = 2.0
        let sx = 3.875f64;
        let sy = 2.0f64;
        for c in 0..3 {
            let at = |x: usize, y: usize| px[((1 + y) * w + 1 + x) * 3 + c] as f64;
            let fx = sx - sx.floor();
            let expect = (at(3, 2) * (1.0 - fx) + at(4, 2) * fx) * (1.0 - (sy - sy.floor()))
                + (at(3, 3) * (1.0 - fx) + at(4, 3) * fx) * (sy - sy.floor());
            let got = out.view(0, 0).unwrap()[(1 * 4 + 2) * 3 + c];
            assert_eq!(got, expect.round() as u8);
        }
    }

    #[test]
    fn crop_out_of_bounds() {
        let lf = MultiViewSAArray::new("b", 1, 1, 4, 4, vec![Some(vec![0; 48])]).unwrap();
        let err = crop_and_resize(&lf, CropBox { left: 2, top: 0, width: 3, height: 2 }, 2, 2);
        assert!(matches!(err, Err(Error::CropOutOfBounds(_))));
    }

    #[test]
    fn container_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let lf = synth_lightfield(&spec(9, 1.0, 5.0), &SynthDims::new(5, 5, 12, 9), "img-9").unwrap();
        save_sa_container(&lf, dir.path()).unwrap();
        assert!(!dir.path().join("sa_00_00.png").exists());
        assert!(dir.path().join("sa_02_02.png").exists());
        let back = load_sa_container(dir.path()).unwrap();
        assert_eq!(back, lf);

        fs::remove_file(dir.path().join("sa_02_03.png")).unwrap();
        assert!(matches!(load_sa_container(dir.path()), Err(Error::MissingView { u: 2, v: 3, .. })));

        save_sa_container(&lf, dir.path()).unwrap();
        image::save_buffer(dir.path().join("sa_01_01.png"), &[0u8; 27], 3, 3, image::ExtendedColorType::Rgb8)
            .unwrap();
        assert!(matches!(load_sa_container(dir.path()), Err(Error::ViewDimensions { .. })));

        fs::write(dir.path().join(MANIFEST_FILE), "{\"views_u\": 2}").unwrap();
        assert!(matches!(load_sa_container(dir.path()), Err(Error::MalformedManifest { .. })));
    }

    #[test]
    fn minimal_container() {
        let dir = tempfile::tempdir().unwrap();
        let lf = MultiViewSAArray::new("one", 1, 1, 8, 8, vec![Some((0..192).map(|i| i as u8).collect())])
            .unwrap();
        save_sa_container(&lf, dir.path()).unwrap();
        let back = load_sa_container(dir.path()).unwrap();
        assert_eq!((back.views_u, back.views_v, back.width, back.height), (1, 1, 8, 8));
        assert_eq!(back, lf);
    }

    proptest! {
        #[test]
        fn resize_stays_within_source_range(
            seed in any::<u64>(),
            (tw, th) in (1usize..20, 1usize..20),
        ) {
            let lf = synth_lightfield(&spec(seed, 0.0, 20.0), &SynthDims::new(1, 1, 11, 9), "p").unwrap();
            let crop = CropBox { left: 2, top: 1, width: 7, height: 6 };
            let src = lf.view(0, 0).unwrap();
            let out = crop_and_resize(&lf, crop, tw, th).unwrap();
            for c in 0..3 {
                let mut lo = 255u8;
                let mut hi = 0u8;
                for y in 1..7 {
                    for x in 2..9 {
                        let p = src[(y * 11 + x) * 3 + c];
                        lo = lo.min(p);
                        hi = hi.max(p);
                    }
                }
                for p in out.view(0, 0).unwrap().iter().skip(c).step_by(3) {
                    prop_assert!(*p >= lo && *p <= hi);
                }
            }
        }
    }
}
