//! Mask-based post-processing: face parsing, class-union masks, paste-back
//! into the original frame, erosion plus blur softening, and the per-pixel
//! blend `m * x_res + (1 - m) * x`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{
    bilinear_clamped, blur_plane, load_gray, resize_bilinear, save_gray, save_image, BlurSpec, Image,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaceClass {
    Skin,
    Brows,
    Eyes,
    Eyeglasses,
    Ears,
    Nose,
    Mouth,
    Lips,
    Hair,
}

impl FaceClass {
    pub const ALL: [FaceClass; 9] = [
        FaceClass::Skin,
        FaceClass::Brows,
        FaceClass::Eyes,
        FaceClass::Eyeglasses,
        FaceClass::Ears,
        FaceClass::Nose,
        FaceClass::Mouth,
        FaceClass::Lips,
        FaceClass::Hair,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FaceClass::Skin => "skin",
            FaceClass::Brows => "brows",
            FaceClass::Eyes => "eyes",
            FaceClass::Eyeglasses => "eyeglasses",
            FaceClass::Ears => "ears",
            FaceClass::Nose => "nose",
            FaceClass::Mouth => "mouth",
            FaceClass::Lips => "lips",
            FaceClass::Hair => "hair",
        }
    }

    /// Fill color of the class in palette-painted images, in `[-1, 1]`.
    pub fn palette_color(self) -> [f32; 3] {
        match self {
            FaceClass::Skin => [0.8, 0.4, 0.2],
            FaceClass::Brows => [-0.6, -0.8, -0.9],
            FaceClass::Eyes => [0.2, 0.6, 1.0],
            FaceClass::Eyeglasses => [0.0, 1.0, 0.0],
            FaceClass::Ears => [1.0, 0.0, 0.6],
            FaceClass::Nose => [0.6, -0.2, -0.4],
            FaceClass::Mouth => [-0.2, -1.0, -0.2],
            FaceClass::Lips => [1.0, -0.6, -0.6],
            FaceClass::Hair => [-0.2, -0.4, 0.8],
        }
    }
}

impl fmt::Display for FaceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FaceClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FaceClass::ALL
            .into_iter()
            .find(|c| c.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown face class {s:?}; expected one of {}",
                    FaceClass::ALL.map(|c| c.name()).join(", ")
                ))
            })
    }
}

/// Comma-separated class list, e.g. `skin,hair,nose`.
pub fn parse_classes(list: &str) -> Result<Vec<FaceClass>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(FaceClass::from_str)
        .collect()
}

/// Scalar raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask data of {} values for {height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("mask contains non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            data: data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value.clamp(0.0, 1.0); height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c).clamp(0.0, 1.0));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.width + c]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn resized(&self, height: usize, width: usize) -> Mask {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        Mask::from_fn(height, width, |r, c| {
            let y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let x = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
            bilinear_clamped(&self.data, self.height, self.width, y, x)
        })
    }

    /// Single-channel PNG, 0..=255.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_gray(&self.data, self.height, self.width, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (data, h, w) = load_gray(path)?;
        Mask::new(h, w, data)
    }
}

/// Per-class boolean rasters of one image. Classes absent from the map are
/// empty.
#[derive(Debug, Clone, PartialEq)]
pub struct SegMask {
    height: usize,
    width: usize,
    classes: BTreeMap<FaceClass, Vec<bool>>,
}

impl SegMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            classes: BTreeMap::new(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn insert(&mut self, class: FaceClass, raster: Vec<bool>) -> Result<()> {
        if raster.len() != self.height * self.width {
            return Err(Error::Shape(format!(
                "{class} raster has {} pixels, expected {}x{}",
                raster.len(),
                self.height,
                self.width
            )));
        }
        self.classes.insert(class, raster);
        Ok(())
    }

    pub fn raster(&self, class: FaceClass) -> Option<&[bool]> {
        self.classes.get(&class).map(|v| v.as_slice())
    }

    pub fn area(&self, class: FaceClass) -> usize {
        self.raster(class).map_or(0, |r| r.iter().filter(|&&b| b).count())
    }

    fn raster_mut(&mut self, class: FaceClass) -> &mut Vec<bool> {
        let n = self.height * self.width;
        self.classes.entry(class).or_insert_with(|| vec![false; n])
    }

    /// Writes `{class}.png` (0/255) for every non-empty class.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (class, raster) in &self.classes {
            let plane: Vec<f32> = raster.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            save_gray(&plane, self.height, self.width, dir.join(format!("{class}.png")))?;
        }
        Ok(())
    }

    /// Reads `{class}.png` files from `dir`; missing classes are empty and
    /// pixels at or above half intensity are set.
    pub fn load_dir(dir: impl AsRef<Path>, height: usize, width: usize) -> Result<Self> {
        let dir = dir.as_ref();
        let mut seg = SegMask::empty(height, width);
        for class in FaceClass::ALL {
            let path = dir.join(format!("{class}.png"));
            if !path.exists() {
                continue;
            }
            let (plane, h, w) = load_gray(&path)?;
            if (h, w) != (height, width) {
                return Err(Error::Shape(format!(
                    "{}: mask is {h}x{w}, image is {height}x{width}",
                    path.display()
                )));
            }
            seg.insert(class, plane.iter().map(|&v| v >= 0.5).collect())?;
        }
        Ok(seg)
    }
}

pub trait FaceParser: Send + Sync {
    fn parse(&self, img: &Image) -> Result<SegMask>;
    fn name(&self) -> &'static str;
}

/// Recognizes images painted with [`FaceClass::palette_color`] fills, such as
/// [`fixture_face`]. Pixels matching no class color stay unlabeled.
#[derive(Debug, Clone)]
pub struct PaletteParser {
    /// Max per-channel distance to a class color.
    pub tolerance: f32,
}

impl Default for PaletteParser {
    fn default() -> Self {
        Self { tolerance: 0.05 }
    }
}

impl FaceParser for PaletteParser {
    fn parse(&self, img: &Image) -> Result<SegMask> {
        let (h, w) = (img.height(), img.width());
        let mut seg = SegMask::empty(h, w);
        for class in FaceClass::ALL {
            let color = class.palette_color();
            let raster: Vec<bool> = (0..h * w)
                .map(|i| (0..3).all(|c| (img.plane(c)[i] - color[c]).abs() <= self.tolerance))
                .collect();
            if raster.iter().any(|&b| b) {
                seg.insert(class, raster)?;
            }
        }
        Ok(seg)
    }

    fn name(&self) -> &'static str {
        "palette"
    }
}

/// Masks prepared ahead of time as `{class}.png` files in one directory.
#[derive(Debug, Clone)]
pub struct FixtureParser {
    pub dir: PathBuf,
}

impl FaceParser for FixtureParser {
    fn parse(&self, img: &Image) -> Result<SegMask> {
        SegMask::load_dir(&self.dir, img.height(), img.width())
    }

    fn name(&self) -> &'static str {
        "fixture"
    }
}

/// Delegates to an external program invoked as `program [args..] INPUT.png
/// OUT_DIR`, which must write `{class}.png` masks into `OUT_DIR`.
#[derive(Debug, Clone, Default)]
pub struct ExternalParser {
    pub command: Vec<String>,
}

impl FaceParser for ExternalParser {
    fn parse(&self, img: &Image) -> Result<SegMask> {
        let Some((program, args)) = self.command.split_first() else {
            return Err(Error::BackendUnavailable(
                "external face parser selected but no parser command is configured".into(),
            ));
        };
        let work = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let input = work.path().join("input.png");
        let out = work.path().join("masks");
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        save_image(img, &input)?;
        let status = std::process::Command::new(program)
            .args(args)
            .arg(&input)
            .arg(&out)
            .status()
            .map_err(|e| Error::BackendUnavailable(format!("cannot run face parser {program:?}: {e}")))?;
        if !status.success() {
            return Err(Error::BackendUnavailable(format!(
                "face parser {program:?} exited with {status}"
            )));
        }
        SegMask::load_dir(&out, img.height(), img.width())
    }

    fn name(&self) -> &'static str {
        "external"
    }
}

/// Union of the selected class rasters as a `{0, 1}` mask.
pub fn combine_mask(seg: &SegMask, classes: &[FaceClass]) -> Mask {
    let mut data = vec![0f32; seg.height * seg.width];
    for class in classes {
        if let Some(r) = seg.raster(*class) {
            for (d, &b) in data.iter_mut().zip(r) {
                if b {
                    *d = 1.0;
                }
            }
        }
    }
    Mask {
        height: seg.height,
        width: seg.width,
        data,
    }
}

/// Destination rectangle of the generated face inside the original frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Placement {
    pub fn full(img: &Image) -> Self {
        Self {
            top: 0,
            left: 0,
            height: img.height(),
            width: img.width(),
        }
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.top && r < self.top + self.height && c >= self.left && c < self.left + self.width
    }
}

impl FromStr for Placement {
    type Err = Error;

    /// `top,left,height,width`.
    fn from_str(s: &str) -> Result<Self> {
        let v = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::InvalidArgument(format!("placement {s:?}: {e}")))?;
        match v.as_slice() {
            &[top, left, height, width] => Ok(Self {
                top,
                left,
                height,
                width,
            }),
            _ => Err(Error::InvalidArgument(format!(
                "placement {s:?} must be top,left,height,width"
            ))),
        }
    }
}

/// Places `x_res` (resized to the rectangle if needed) and its mask into
/// `x`'s frame. Outside the rectangle the image is `x` and the mask is 0.
pub fn paste_back(x: &Image, x_res: &Image, mask: &Mask, placement: Placement) -> Result<(Image, Mask)> {
    let Placement {
        top,
        left,
        height,
        width,
    } = placement;
    if top + height > x.height() || left + width > x.width() {
        return Err(Error::InvalidArgument(format!(
            "placement {height}x{width} at ({top}, {left}) leaves the {}x{} frame",
            x.height(),
            x.width()
        )));
    }
    if (mask.height, mask.width) != (x_res.height(), x_res.width()) {
        return Err(Error::Shape(format!(
            "mask is {}x{}, generated image is {}x{}",
            mask.height,
            mask.width,
            x_res.height(),
            x_res.width()
        )));
    }
    let mut out = x.clone();
    let mut placed = Mask::filled(x.height(), x.width(), 0.0);
    if height == 0 || width == 0 {
        return Ok((out, placed));
    }
    let src = resize_bilinear(x_res, height, width);
    let m = mask.resized(height, width);
    for r in 0..height {
        for c in 0..width {
            for ch in 0..3 {
                out.set(ch, top + r, left + c, src.get(ch, r, c));
            }
            placed.data[(top + r) * x.width() + left + c] = m.get(r, c);
        }
    }
    Ok((out, placed))
}

/// Softening parameters; `None` fields take the resolution-scaled defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SoftenConfig {
    pub erode_radius: Option<usize>,
    pub blur_kernel: Option<usize>,
    pub blur_sigma: Option<f64>,
}

impl SoftenConfig {
    /// 4 px erosion and a 21-tap, sigma 5 blur at 1024, scaled linearly.
    pub fn resolve(&self, resolution: usize) -> Result<(usize, BlurSpec)> {
        let scale = resolution as f64 / 1024.0;
        let radius = self.erode_radius.unwrap_or_else(|| (4.0 * scale).round() as usize);
        let kernel = self.blur_kernel.unwrap_or_else(|| {
            let k = (21.0 * scale).round().max(1.0) as usize;
            k | 1
        });
        let sigma = self.blur_sigma.unwrap_or((5.0 * scale).max(1e-3));
        Ok((radius, BlurSpec::new(kernel, sigma)?))
    }
}

/// Grayscale erosion (minimum over a disk of `radius`), treating pixels
/// outside the frame as 0. On `{0, 1}` masks this is binary erosion.
pub fn erode(m: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return m.clone();
    }
    let r = radius as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    let (h, w) = (m.height as isize, m.width as isize);
    Mask::from_fn(m.height, m.width, |row, col| {
        let mut v = f32::INFINITY;
        for &(dy, dx) in &offsets {
            let (y, x) = (row as isize + dy, col as isize + dx);
            if y < 0 || y >= h || x < 0 || x >= w {
                return 0.0;
            }
            v = v.min(m.data[(y * w + x) as usize]);
        }
        v
    })
}

/// Erosion by a disk, then Gaussian blur, clamped to `[0, 1]`.
pub fn soften(m: &Mask, erode_radius: usize, blur: &BlurSpec) -> Mask {
    let eroded = erode(m, erode_radius);
    let data = blur_plane(&eroded.data, m.height, m.width, blur);
    Mask {
        height: m.height,
        width: m.width,
        data: data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    }
}

/// `m * x_res + (1 - m) * x` per channel. Each result is clamped to the
/// interval spanned by its two sources so rounding never leaves it.
pub fn composite(x: &Image, x_res: &Image, m: &Mask) -> Result<Image> {
    let (h, w) = (x.height(), x.width());
    if (x_res.height(), x_res.width()) != (h, w) || (m.height, m.width) != (h, w) {
        return Err(Error::Shape(format!(
            "composite inputs differ: original {h}x{w}, generated {}x{}, mask {}x{}",
            x_res.height(),
            x_res.width(),
            m.height,
            m.width
        )));
    }
    let mut out = x.clone();
    for c in 0..3 {
        for i in 0..h * w {
            let (a, b, t) = (x_res.plane(c)[i], x.plane(c)[i], m.data[i]);
            let v = t * a + (1.0 - t) * b;
            out.data_mut()[c * h * w + i] = v.clamp(a.min(b), a.max(b));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct CompositeOutput {
    pub image: Image,
    /// The class union in the generated image's frame.
    pub mask: Mask,
    /// The softened mask in the original frame.
    pub soft_mask: Mask,
}

/// parse, combine, paste back, soften and blend in one call.
pub fn composite_pipeline(
    x: &Image,
    x_res: &Image,
    parser: &dyn FaceParser,
    classes: &[FaceClass],
    placement: Placement,
    soften_cfg: &SoftenConfig,
) -> Result<CompositeOutput> {
    let seg = parser.parse(x_res)?;
    let mask = combine_mask(&seg, classes);
    let (pasted, placed) = paste_back(x, x_res, &mask, placement)?;
    let (radius, blur) = soften_cfg.resolve(x_res.height())?;
    let soft_mask = soften(&placed, radius, &blur);
    Ok(CompositeOutput {
        image: composite(x, &pasted, &soft_mask)?,
        mask,
        soft_mask,
    })
}

/// Synthetic palette-painted portrait of size `res` and its ground-truth
/// masks: hair cap, ears, face ellipse, brows, eyes, nose, lips and mouth on
/// a gray background.
pub fn fixture_face(res: usize) -> (Image, SegMask) {
    let s = res as f64;
    let ellipse = |cy: f64, cx: f64, ry: f64, rx: f64| {
        move |r: usize, c: usize| {
            let y = (r as f64 + 0.5) / s - cy;
            let x = (c as f64 + 0.5) / s - cx;
            (y / ry).powi(2) + (x / rx).powi(2) <= 1.0
        }
    };
    let rect = |y0: f64, x0: f64, y1: f64, x1: f64| {
        move |r: usize, c: usize| {
            let (y, x) = ((r as f64 + 0.5) / s, (c as f64 + 0.5) / s);
            y >= y0 && y < y1 && x >= x0 && x < x1
        }
    };
    type Shape = Box<dyn Fn(usize, usize) -> bool>;
    // Later entries paint over earlier ones.
    let layers: Vec<(FaceClass, Shape)> = vec![
        (FaceClass::Hair, Box::new(ellipse(0.42, 0.5, 0.36, 0.36))),
        (FaceClass::Ears, Box::new(ellipse(0.56, 0.21, 0.07, 0.045))),
        (FaceClass::Ears, Box::new(ellipse(0.56, 0.79, 0.07, 0.045))),
        (FaceClass::Skin, Box::new(ellipse(0.56, 0.5, 0.32, 0.27))),
        (FaceClass::Brows, Box::new(rect(0.4, 0.31, 0.43, 0.44))),
        (FaceClass::Brows, Box::new(rect(0.4, 0.56, 0.43, 0.69))),
        (FaceClass::Eyes, Box::new(ellipse(0.48, 0.38, 0.03, 0.055))),
        (FaceClass::Eyes, Box::new(ellipse(0.48, 0.62, 0.03, 0.055))),
        (FaceClass::Nose, Box::new(ellipse(0.6, 0.5, 0.07, 0.04))),
        (FaceClass::Lips, Box::new(ellipse(0.74, 0.5, 0.045, 0.12))),
        (FaceClass::Mouth, Box::new(ellipse(0.74, 0.5, 0.012, 0.09))),
    ];
    let mut owner: Vec<Option<FaceClass>> = vec![None; res * res];
    for r in 0..res {
        for c in 0..res {
            for (class, inside) in &layers {
                if inside(r, c) {
                    owner[r * res + c] = Some(*class);
                }
            }
        }
    }
    let mut seg = SegMask::empty(res, res);
    for (i, o) in owner.iter().enumerate() {
        if let Some(class) = o {
            seg.raster_mut(*class)[i] = true;
        }
    }
    let img = Image::from_fn(res, res, |ch, r, c| match owner[r * res + c] {
        Some(class) => class.palette_color()[ch],
        None => 0.0,
    });
    (img, seg)
}
