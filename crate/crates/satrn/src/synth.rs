//! Deterministic synthetic text-image generation: a fixed 5x3 bitmap font
//! rendered in horizontal, rotated, or two-line layouts, with Gaussian pixel
//! noise. Every sample derives its own rng streams from (seed, index), so
//! content, layout, and noise draws never interfere and generation shards
//! cleanly.

use crate::error::{Error, Result};
use crate::pgm;
use crate::scalar::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fmt::Write as _;
use std::path::Path;

/// 5 rows x 3 cols digit bitmaps. Pairwise Hamming distance >= 2 so no two
/// glyphs collapse under single-pixel noise.
const DIGIT_ROWS: [(char, [&str; 5]); 10] = [
    ('0', ["111", "101", "101", "101", "111"]),
    ('1', ["010", "110", "010", "010", "111"]),
    ('2', ["111", "001", "111", "100", "111"]),
    ('3', ["111", "001", "011", "001", "111"]),
    ('4', ["101", "101", "111", "001", "001"]),
    ('5', ["111", "100", "111", "001", "110"]),
    ('6', ["100", "100", "111", "101", "111"]),
    ('7', ["111", "001", "010", "010", "010"]),
    ('8', ["111", "101", "010", "101", "111"]),
    ('9', ["111", "101", "111", "001", "111"]),
];

pub const GLYPH_ROWS: usize = 5;
pub const GLYPH_COLS: usize = 3;

#[derive(Debug, Clone)]
pub struct GlyphFont {
    glyphs: Vec<(char, [u8; GLYPH_ROWS * GLYPH_COLS])>,
    pub ink: f64,
    pub bg: f64,
}

impl GlyphFont {
    pub fn digits() -> Self {
        let glyphs = DIGIT_ROWS
            .iter()
            .map(|(c, rows)| {
                let mut bits = [0u8; GLYPH_ROWS * GLYPH_COLS];
                for (r, row) in rows.iter().enumerate() {
                    for (col, ch) in row.bytes().enumerate() {
                        bits[r * GLYPH_COLS + col] = (ch == b'1') as u8;
                    }
                }
                (*c, bits)
            })
            .collect();
        GlyphFont { glyphs, ink: 1.0, bg: 0.0 }
    }

    pub fn chars(&self) -> impl Iterator<Item = char> + '_ {
        self.glyphs.iter().map(|(c, _)| *c)
    }

    pub fn bits(&self, c: char) -> Option<&[u8; GLYPH_ROWS * GLYPH_COLS]> {
        self.glyphs.iter().find(|(g, _)| *g == c).map(|(_, b)| b)
    }

    /// Smallest pairwise Hamming distance between glyph bitmaps.
    pub fn min_pairwise_distance(&self) -> usize {
        let mut best = usize::MAX;
        for i in 0..self.glyphs.len() {
            for j in i + 1..self.glyphs.len() {
                let d = self.glyphs[i]
                    .1
                    .iter()
                    .zip(&self.glyphs[j].1)
                    .filter(|(a, b)| a != b)
                    .count();
                best = best.min(d);
            }
        }
        best
    }
}

/// Text layout of one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Layout {
    Horizontal,
    Rotated(f64),
    Multiline,
}

impl Layout {
    pub fn tag(&self) -> &'static str {
        match self {
            Layout::Horizontal => "horizontal",
            Layout::Rotated(_) => "rotated",
            Layout::Multiline => "multiline",
        }
    }
}

/// Angle model for the rotated layout.
#[derive(Debug, Clone, PartialEq)]
pub enum RotationModel {
    /// theta ~ Uniform(0, 360)
    Uniform360,
    /// uniform pick from a fixed angle set
    Fixed(Vec<f64>),
}

impl RotationModel {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "uniform" {
            return Ok(RotationModel::Uniform360);
        }
        if let Some(rest) = s.strip_prefix("fixed:") {
            let angles: std::result::Result<Vec<f64>, _> =
                rest.split(',').map(|a| a.trim().parse::<f64>()).collect();
            let angles = angles.map_err(|_| {
                Error::Config(format!("bad rotation spec {s:?} (expected fixed:a,b,...)"))
            })?;
            if angles.is_empty() {
                return Err(Error::Config("rotation fixed set is empty".into()));
            }
            return Ok(RotationModel::Fixed(angles));
        }
        Err(Error::Config(format!(
            "bad rotation spec {s:?} (expected uniform or fixed:a,b,...)"
        )))
    }

    pub fn to_string_key(&self) -> String {
        match self {
            RotationModel::Uniform360 => "uniform".into(),
            RotationModel::Fixed(a) => {
                let mut s = String::from("fixed:");
                for (i, v) in a.iter().enumerate() {
                    if i > 0 {
                        s.push(',');
                    }
                    let _ = write!(s, "{v}");
                }
                s
            }
        }
    }
}

/// Full generation spec; serialized into `meta.txt`.
#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub w_horizontal: f64,
    pub w_rotated: f64,
    pub w_multiline: f64,
    pub rotation: RotationModel,
    pub noise: f64,
    pub scale: usize,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            count: 1000,
            height: 32,
            width: 64,
            len_min: 4,
            len_max: 4,
            w_horizontal: 1.0,
            w_rotated: 0.0,
            w_multiline: 0.0,
            rotation: RotationModel::Fixed(vec![0.0]),
            noise: 0.02,
            scale: 3,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("count", self.count.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("len_min", self.len_min.to_string()),
            ("len_max", self.len_max.to_string()),
            ("w_horizontal", format!("{}", self.w_horizontal)),
            ("w_rotated", format!("{}", self.w_rotated)),
            ("w_multiline", format!("{}", self.w_multiline)),
            ("rotation", self.rotation.to_string_key()),
            ("noise", format!("{}", self.noise)),
            ("scale", self.scale.to_string()),
            ("seed", self.seed.to_string()),
        ] {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |k: &str| Error::Config(format!("bad value {value:?} for key {k}"));
        match key {
            "count" => self.count = value.parse().map_err(|_| bad(key))?,
            "height" => self.height = value.parse().map_err(|_| bad(key))?,
            "width" => self.width = value.parse().map_err(|_| bad(key))?,
            "len_min" => self.len_min = value.parse().map_err(|_| bad(key))?,
            "len_max" => self.len_max = value.parse().map_err(|_| bad(key))?,
            "w_horizontal" => self.w_horizontal = value.parse().map_err(|_| bad(key))?,
            "w_rotated" => self.w_rotated = value.parse().map_err(|_| bad(key))?,
            "w_multiline" => self.w_multiline = value.parse().map_err(|_| bad(key))?,
            "rotation" => self.rotation = RotationModel::parse(value)?,
            "noise" => self.noise = value.parse().map_err(|_| bad(key))?,
            "scale" => self.scale = value.parse().map_err(|_| bad(key))?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            _ => return Err(Error::Config(format!("unknown generation key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<GenSpec> {
        let mut spec = GenSpec::default();
        for (k, v) in crate::config::parse_kv_lines(text)? {
            spec.apply_kv(&k, &v)?;
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone)]
pub struct SampleRec {
    pub index: usize,
    pub pixels: Vec<u8>,
    pub label: String,
    pub layout: Layout,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub samples: Vec<SampleRec>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_rngs(seed: u64, index: usize) -> (ChaCha8Rng, ChaCha8Rng, ChaCha8Rng) {
    let sub = splitmix64(seed ^ splitmix64(index as u64 + 1));
    let mut content = ChaCha8Rng::seed_from_u64(sub);
    content.set_stream(0);
    let mut layout = ChaCha8Rng::seed_from_u64(sub);
    layout.set_stream(1);
    let mut noise = ChaCha8Rng::seed_from_u64(sub);
    noise.set_stream(2);
    (content, layout, noise)
}

struct Canvas {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn new(h: usize, w: usize, bg: f64) -> Self {
        Canvas { h, w, data: vec![bg; h * w] }
    }

    fn draw_glyph(&mut self, font: &GlyphFont, c: char, y0: usize, x0: usize, scale: usize) {
        let bits = font.bits(c).expect("validated against font");
        for r in 0..GLYPH_ROWS {
            for col in 0..GLYPH_COLS {
                if bits[r * GLYPH_COLS + col] == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let y = y0 + r * scale + dy;
                        let x = x0 + col * scale + dx;
                        self.data[y * self.w + x] = font.ink;
                    }
                }
            }
        }
    }
}

/// Bounding box of rendered ink: (y0, x0, height, width).
type BBox = (usize, usize, usize, usize);

/// Lay out one line of glyphs. Returns glyph x positions and the text width.
fn line_layout(rng: &mut ChaCha8Rng, n: usize, scale: usize) -> (Vec<usize>, usize) {
    let gw = GLYPH_COLS * scale;
    let mut xs = Vec::with_capacity(n);
    let mut x = 0;
    for i in 0..n {
        xs.push(x);
        x += gw;
        if i + 1 < n {
            x += scale + rng.gen_range(0..=scale);
        }
    }
    (xs, x)
}

/// Worst-case line width for fit checks.
fn max_line_width(n: usize, scale: usize) -> usize {
    n * GLYPH_COLS * scale + n.saturating_sub(1) * 2 * scale
}

fn render_line(
    canvas: &mut Canvas,
    font: &GlyphFont,
    label: &str,
    scale: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BBox> {
    let n = label.chars().count();
    let (xs, total_w) = line_layout(rng, n, scale);
    let gh = GLYPH_ROWS * scale;
    let jitter = scale as isize;
    let jx = rng.gen_range(-jitter..=jitter);
    let jy = rng.gen_range(-jitter..=jitter);
    let x0 = (canvas.w as isize - total_w as isize) / 2 + jx;
    let y0 = (canvas.h as isize - gh as isize) / 2 + jy;
    if x0 < 0 || y0 < 0 || x0 as usize + total_w > canvas.w || y0 as usize + gh > canvas.h {
        return Err(Error::Generation(format!(
            "string {label:?} does not fit a {}x{} canvas at scale {scale}",
            canvas.h, canvas.w
        )));
    }
    for (c, gx) in label.chars().zip(&xs) {
        canvas.draw_glyph(font, c, y0 as usize, x0 as usize + gx, scale);
    }
    Ok((y0 as usize, x0 as usize, gh, total_w))
}

fn render_two_lines(
    canvas: &mut Canvas,
    font: &GlyphFont,
    label: &str,
    scale: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BBox> {
    let chars: Vec<char> = label.chars().collect();
    let split = chars.len().div_ceil(2);
    let (top, bottom): (String, String) =
        (chars[..split].iter().collect(), chars[split..].iter().collect());
    let gh = GLYPH_ROWS * scale;
    let gap = scale + rng.gen_range(0..=scale);
    let block_h = 2 * gh + gap;
    let jitter = scale as isize;
    let jy = rng.gen_range(-jitter..=jitter);
    let y0 = (canvas.h as isize - block_h as isize) / 2 + jy;
    if y0 < 0 || y0 as usize + block_h > canvas.h {
        return Err(Error::Generation(format!(
            "two lines do not fit a {}x{} canvas at scale {scale}",
            canvas.h, canvas.w
        )));
    }
    let mut bbox: Option<BBox> = None;
    for (line, ly) in [(top, y0 as usize), (bottom, y0 as usize + gh + gap)] {
        if line.is_empty() {
            continue;
        }
        let n = line.chars().count();
        let (xs, total_w) = line_layout(rng, n, scale);
        let jx = rng.gen_range(-jitter..=jitter);
        let x0 = (canvas.w as isize - total_w as isize) / 2 + jx;
        if x0 < 0 || x0 as usize + total_w > canvas.w {
            return Err(Error::Generation(format!(
                "line {line:?} does not fit a {}x{} canvas at scale {scale}",
                canvas.h, canvas.w
            )));
        }
        for (c, gx) in line.chars().zip(&xs) {
            canvas.draw_glyph(font, c, ly, x0 as usize + gx, scale);
        }
        bbox = Some(match bbox {
            None => (ly, x0 as usize, gh, total_w),
            Some((by, bx, bh, bw)) => {
                let ny = by.min(ly);
                let nx = bx.min(x0 as usize);
                let ny1 = (by + bh).max(ly + gh);
                let nx1 = (bx + bw).max(x0 as usize + total_w);
                (ny, nx, ny1 - ny, nx1 - nx)
            }
        });
    }
    Ok(bbox.expect("at least one line"))
}

/// Rotation about the image center. Multiples of 90 degrees are exact pixel
/// permutations (90/270 need a square image); anything else is sampled
/// bilinearly with `fill` outside the support.
pub fn rotate_image<T: Scalar>(img: &[T], h: usize, w: usize, theta_deg: f64, fill: T) -> Vec<T> {
    let theta = theta_deg.rem_euclid(360.0);
    let near = |x: f64, y: f64| (x - y).abs() < 1e-9;
    if near(theta, 0.0) || near(theta, 360.0) {
        return img.to_vec();
    }
    if near(theta, 180.0) {
        let mut out = vec![fill; h * w];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = img[(h - 1 - y) * w + (w - 1 - x)];
            }
        }
        return out;
    }
    if h == w && (near(theta, 90.0) || near(theta, 270.0)) {
        let n = h;
        let mut out = vec![fill; n * n];
        for y in 0..n {
            for x in 0..n {
                // inverse mapping: source = R(theta) applied around center
                let (sy, sx) = if near(theta, 90.0) {
                    (x, n - 1 - y)
                } else {
                    (n - 1 - x, y)
                };
                out[y * w + x] = img[sy * w + sx];
            }
        }
        return out;
    }
    let rad = theta.to_radians();
    let (sin, cos) = rad.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = vec![fill; h * w];
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sy = cy + dy * cos + dx * sin;
            let sx = cx - dy * sin + dx * cos;
            if sy < -0.5 || sx < -0.5 || sy > h as f64 - 0.5 || sx > w as f64 - 0.5 {
                continue;
            }
            let y0 = sy.floor();
            let x0 = sx.floor();
            let fy = sy - y0;
            let fx = sx - x0;
            let sample = |yy: f64, xx: f64| -> f64 {
                if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
                    fill.as_f64()
                } else {
                    img[yy as usize * w + xx as usize].as_f64()
                }
            };
            let v = sample(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + sample(y0, x0 + 1.0) * (1.0 - fy) * fx
                + sample(y0 + 1.0, x0) * fy * (1.0 - fx)
                + sample(y0 + 1.0, x0 + 1.0) * fy * fx;
            out[y * w + x] = T::from_f64(v);
        }
    }
    out
}

fn validate_spec(spec: &GenSpec, font: &GlyphFont) -> Result<()> {
    if spec.len_min == 0 || spec.len_min > spec.len_max {
        return Err(Error::Config(format!(
            "bad length range {}..{}",
            spec.len_min, spec.len_max
        )));
    }
    if spec.scale == 0 {
        return Err(Error::Config("glyph scale must be >= 1".into()));
    }
    let total = spec.w_horizontal + spec.w_rotated + spec.w_multiline;
    if !(total > 0.0) || spec.w_horizontal < 0.0 || spec.w_rotated < 0.0 || spec.w_multiline < 0.0 {
        return Err(Error::Config("layout weights must be nonnegative with a positive sum".into()));
    }
    if spec.noise < 0.0 {
        return Err(Error::Config("noise sigma must be >= 0".into()));
    }
    let s = spec.scale;
    let gh = GLYPH_ROWS * s;
    // worst-case fit checks so generation never fails mid-run
    if spec.w_horizontal > 0.0 || spec.w_rotated > 0.0 {
        let need_w = max_line_width(spec.len_max, s) + 2 * s;
        let need_h = gh + 2 * s;
        if need_w > spec.width || need_h > spec.height {
            return Err(Error::Generation(format!(
                "a {}-char line at scale {s} cannot fit {}x{} (worst case needs {}x{})",
                spec.len_max, spec.height, spec.width, need_h, need_w
            )));
        }
    }
    if spec.w_rotated > 0.0 {
        // worst-case text box, centered up to the jitter margin
        let bw = (max_line_width(spec.len_max, s) + 2 * s) as f64;
        let bh = (gh + 2 * s) as f64;
        let fits = |theta: f64| -> bool {
            let rad = theta.to_radians();
            let (sin, cos) = (rad.sin().abs(), rad.cos().abs());
            // extents of the rotated box around the canvas center
            let rh = bh * cos + bw * sin;
            let rw = bh * sin + bw * cos;
            rh + 2.0 <= spec.height as f64 && rw + 2.0 <= spec.width as f64
        };
        let ok = match &spec.rotation {
            RotationModel::Fixed(set) => set.iter().all(|&t| fits(t)),
            RotationModel::Uniform360 => {
                let radius = (bw * bw + bh * bh).sqrt() / 2.0;
                radius + 1.0 <= spec.height.min(spec.width) as f64 / 2.0
            }
        };
        if !ok {
            return Err(Error::Generation(format!(
                "a rotated {}-char line at scale {s} can leave the {}x{} canvas",
                spec.len_max, spec.height, spec.width
            )));
        }
    }
    if spec.w_multiline > 0.0 {
        let top = spec.len_max.div_ceil(2);
        let need_w = max_line_width(top, s) + 2 * s;
        let need_h = 2 * gh + 2 * s + 2 * s;
        if need_w > spec.width || need_h > spec.height {
            return Err(Error::Generation(format!(
                "two {top}-char lines at scale {s} cannot fit {}x{}",
                spec.height, spec.width
            )));
        }
    }
    if font.glyphs.is_empty() {
        return Err(Error::Config("font has no glyphs".into()));
    }
    Ok(())
}

/// Render one sample. Exposed so callers can re-render any index bit-exactly.
pub fn render_sample(spec: &GenSpec, font: &GlyphFont, index: usize) -> Result<SampleRec> {
    let (mut content, mut layout_rng, mut noise_rng) = sample_rngs(spec.seed, index);
    let chars: Vec<char> = font.chars().collect();
    let len = content.gen_range(spec.len_min..=spec.len_max);
    let label: String = (0..len).map(|_| chars[content.gen_range(0..chars.len())]).collect();

    let total = spec.w_horizontal + spec.w_rotated + spec.w_multiline;
    let pick: f64 = layout_rng.gen::<f64>() * total;
    let layout = if pick < spec.w_horizontal {
        Layout::Horizontal
    } else if pick < spec.w_horizontal + spec.w_rotated {
        let theta = match &spec.rotation {
            RotationModel::Uniform360 => layout_rng.gen_range(0.0..360.0),
            RotationModel::Fixed(set) => set[layout_rng.gen_range(0..set.len())],
        };
        Layout::Rotated(theta)
    } else {
        Layout::Multiline
    };

    let mut canvas = Canvas::new(spec.height, spec.width, font.bg);
    match layout {
        Layout::Horizontal | Layout::Rotated(_) => {
            render_line(&mut canvas, font, &label, spec.scale, &mut content)?;
        }
        Layout::Multiline => {
            render_two_lines(&mut canvas, font, &label, spec.scale, &mut content)?;
        }
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("validated sigma");
        for v in &mut canvas.data {
            *v = (*v + normal.sample(&mut noise_rng)).clamp(0.0, 1.0);
        }
    }
    let data = match layout {
        Layout::Rotated(theta) => rotate_image(&canvas.data, spec.height, spec.width, theta, font.bg),
        _ => canvas.data,
    };
    let pixels: Vec<u8> = data.iter().map(|v| (v * 255.0).round() as u8).collect();
    Ok(SampleRec { index, pixels, label, layout })
}

/// Generate a full dataset, deterministic in `spec.seed`.
pub fn generate(spec: &GenSpec, font: &GlyphFont) -> Result<Dataset> {
    validate_spec(spec, font)?;
    let samples = (0..spec.count)
        .map(|i| render_sample(spec, font, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { height: spec.height, width: spec.width, samples })
}

fn theta_str(layout: &Layout) -> String {
    match layout {
        Layout::Rotated(t) => format!("{t:.6}"),
        _ => "-".to_string(),
    }
}

pub fn save_dataset(ds: &Dataset, spec: &GenSpec, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut labels = String::from("index\tlayout\ttheta\tlabel\n");
    for s in &ds.samples {
        pgm::write_pgm(&dir.join(format!("{}.pgm", s.index)), ds.width, ds.height, &s.pixels)?;
        let _ = writeln!(
            labels,
            "{}\t{}\t{}\t{}",
            s.index,
            s.layout.tag(),
            theta_str(&s.layout),
            s.label
        );
    }
    std::fs::write(dir.join("labels.tsv"), labels)?;
    std::fs::write(dir.join("meta.txt"), spec.to_kv())?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let labels_path = dir.join("labels.tsv");
    let text = std::fs::read_to_string(&labels_path)
        .map_err(|e| Error::Data(format!("{}: {e}", labels_path.display())))?;
    let mut samples = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue; // header
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::Data(format!(
                "labels.tsv line {}: expected 4 columns, got {}",
                i + 1,
                cols.len()
            )));
        }
        let index: usize = cols[0]
            .parse()
            .map_err(|_| Error::Data(format!("labels.tsv line {}: bad index", i + 1)))?;
        let layout = match cols[1] {
            "horizontal" => Layout::Horizontal,
            "multiline" => Layout::Multiline,
            "rotated" => {
                let theta: f64 = cols[2].parse().map_err(|_| {
                    Error::Data(format!("labels.tsv line {}: bad theta", i + 1))
                })?;
                Layout::Rotated(theta)
            }
            other => {
                return Err(Error::Data(format!(
                    "labels.tsv line {}: unknown layout {other:?}",
                    i + 1
                )))
            }
        };
        let (w, h, pixels) = pgm::read_pgm(&dir.join(format!("{index}.pgm")))?;
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d != (h, w) => {
                return Err(Error::Data(format!(
                    "dataset mixes image sizes: {d:?} vs ({h}, {w})"
                )))
            }
            _ => {}
        }
        samples.push(SampleRec { index, pixels, label: cols[3].to_string(), layout });
    }
    let (height, width) = dims.ok_or_else(|| Error::Data("no samples".to_string()))?;
    Ok(Dataset { height, width, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_are_distinguishable() {
        let font = GlyphFont::digits();
        assert_eq!(font.chars().count(), 10);
        assert!(font.min_pairwise_distance() >= 2);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = GenSpec { count: 20, ..GenSpec::default() };
        let font = GlyphFont::digits();
        let a = generate(&spec, &font).unwrap();
        let b = generate(&spec, &font).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.pixels, y.pixels);
            assert_eq!(x.label, y.label);
        }
        // and a sample can be re-rendered from its index alone
        let again = render_sample(&spec, &font, 7).unwrap();
        assert_eq!(again.pixels, a.samples[7].pixels);
    }

    #[test]
    fn zero_rotation_equals_horizontal_sample() {
        let font = GlyphFont::digits();
        let horizontal = GenSpec { count: 5, ..GenSpec::default() };
        let rotated = GenSpec {
            count: 5,
            w_horizontal: 0.0,
            w_rotated: 1.0,
            rotation: RotationModel::Fixed(vec![0.0]),
            ..GenSpec::default()
        };
        let a = generate(&horizontal, &font).unwrap();
        let b = generate(&rotated, &font).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.label, y.label);
            assert_eq!(x.pixels, y.pixels, "theta=0 must match the horizontal render");
        }
    }

    #[test]
    fn rotation_180_is_double_flip() {
        let font = GlyphFont::digits();
        let base = GenSpec {
            count: 5,
            height: 64,
            width: 64,
            w_horizontal: 0.0,
            w_rotated: 1.0,
            rotation: RotationModel::Fixed(vec![0.0]),
            ..GenSpec::default()
        };
        let flipped = GenSpec {
            rotation: RotationModel::Fixed(vec![180.0]),
            ..base.clone()
        };
        let a = generate(&base, &font).unwrap();
        let b = generate(&flipped, &font).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            let (h, w) = (64, 64);
            for yy in 0..h {
                for xx in 0..w {
                    assert_eq!(
                        y.pixels[yy * w + xx],
                        x.pixels[(h - 1 - yy) * w + (w - 1 - xx)],
                        "180-degree sample must equal the flipped 0-degree sample"
                    );
                }
            }
        }
    }

    #[test]
    fn rotate_identity_and_group_law() {
        let img: Vec<f64> = (0..36).map(|i| (i as f64) / 35.0).collect();
        assert_eq!(rotate_image(&img, 6, 6, 0.0, 0.0), img);
        let once = rotate_image(&img, 6, 6, 90.0, 0.0);
        let twice = rotate_image(&once, 6, 6, 90.0, 0.0);
        let direct = rotate_image(&img, 6, 6, 180.0, 0.0);
        assert_eq!(twice, direct);
        let thrice = rotate_image(&twice, 6, 6, 90.0, 0.0);
        assert_eq!(thrice, rotate_image(&img, 6, 6, 270.0, 0.0));
    }

    #[test]
    fn bilinear_roundtrip_recovers_interior() {
        // smooth image, rotate by 23 degrees and back; interior error is small
        let (h, w) = (24, 24);
        let img: Vec<f64> = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                0.5 + 0.4 * ((x as f64) * 0.3).sin() * ((y as f64) * 0.2).cos()
            })
            .collect();
        let there = rotate_image(&img, h, w, 23.0, 0.5);
        let back = rotate_image(&there, h, w, -23.0, 0.5);
        let mut err = 0.0;
        let mut n = 0;
        for y in 6..h - 6 {
            for x in 6..w - 6 {
                err += (back[y * w + x] - img[y * w + x]).abs();
                n += 1;
            }
        }
        assert!(err / (n as f64) < 0.02, "mean abs error {}", err / n as f64);
    }

    #[test]
    fn class_balance_over_many_samples() {
        let spec = GenSpec { count: 10_000, noise: 0.0, ..GenSpec::default() };
        let font = GlyphFont::digits();
        let ds = generate(&spec, &font).unwrap();
        let mut counts = [0usize; 10];
        let mut total = 0usize;
        for s in &ds.samples {
            for c in s.label.chars() {
                counts[c.to_digit(10).unwrap() as usize] += 1;
                total += 1;
            }
        }
        let expect = total as f64 / 10.0;
        for (d, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - expect).abs() / expect;
            assert!(dev < 0.2, "digit {d} frequency off by {dev:.3}");
        }
    }

    #[test]
    fn too_long_string_is_rejected_up_front() {
        let spec = GenSpec { len_min: 9, len_max: 9, ..GenSpec::default() };
        let font = GlyphFont::digits();
        assert!(matches!(generate(&spec, &font), Err(Error::Generation(_))));
    }

    #[test]
    fn dataset_dir_roundtrip() {
        let spec = GenSpec { count: 8, w_multiline: 0.4, len_min: 2, len_max: 4, scale: 2, ..GenSpec::default() };
        let font = GlyphFont::digits();
        let ds = generate(&spec, &font).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, &spec, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), ds.len());
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.pixels, b.pixels);
            assert_eq!(a.label, b.label);
            assert_eq!(a.layout.tag(), b.layout.tag());
        }
    }
}
