//! Video-music matching: frame and motion features, rhythm tokens, twin
//! encoders joined by cross-attention, and triplet-loss training.

use std::fs;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{load_wav, to_mono, AudioClip};
use crate::dataset::{list_frames, MixManifest};
use crate::error::{Error, Result};
use crate::nn::{
    cross_attention, cross_attention_backward, dot, linear, linear_backward, rope_rotate,
    rope_rotate_backward, squared_distance, triplet_loss, AdamConfig, Gradients, Matrix, ParamStore,
};
use crate::spectral::{mel_spectrogram, onset_envelope, MelSpectrogram, MEL_BANDS};

pub const FRAME_SIZE: usize = 224;
pub const FRAMES_PER_CLIP: usize = crate::dataset::FRAMES_PER_CLIP;
pub const BLOCK_SIZE: usize = 16;
pub const BLOCK_GRID: usize = FRAME_SIZE / BLOCK_SIZE;
pub const SEARCH_RADIUS: i32 = 4;
/// Side of the pooled thumbnail fed to the video encoder.
pub const POOL_GRID: usize = 8;
/// Time segments the mel spectrogram is pooled into (attention queries).
pub const MEL_SEGMENTS: usize = 8;
const NORM_EPS: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Rasters

/// Grayscale image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height} raster",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("raster intensities must lie in [0, 1]".into()));
        }
        Ok(Raster { width, height, data })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

fn pgm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

/// Decodes a binary (P5) graymap with 8- or 16-bit samples.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Raster> {
    let bad = |reason: &str| Error::MalformedRaster {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut pos = 0;
    if pgm_token(bytes, &mut pos) != Some(b"P5") {
        return Err(bad("not a binary PGM (P5) file"));
    }
    let mut field = |name: &str| -> Result<usize> {
        pgm_token(bytes, &mut pos)
            .and_then(|t| std::str::from_utf8(t).ok())
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(&format!("bad {name}")))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65_535 {
        return Err(bad("zero size or maxval out of range"));
    }
    // Exactly one whitespace byte separates the header from the samples.
    pos += 1;
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let need = width * height * bytes_per;
    let body = bytes.get(pos..pos + need).ok_or_else(|| bad("pixel data is truncated"))?;
    let scale = maxval as f64;
    let data = if bytes_per == 1 {
        body.iter().map(|&b| (b as f64 / scale).min(1.0)).collect()
    } else {
        body.chunks_exact(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f64 / scale).min(1.0))
            .collect()
    };
    Ok(Raster { width, height, data })
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    decode_pgm(&bytes, path)
}

/// 8-bit P5 encoding, rounding to the nearest level.
pub fn encode_pgm(raster: &Raster) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    out.extend(raster.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn save_pgm(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(raster)).map_err(|e| Error::io(path, e))
}

/// Four 224x224 frames sampled at one per second.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Raster>,
}

impl FrameSequence {
    pub fn new(frames: Vec<Raster>) -> Result<Self> {
        if frames.len() != FRAMES_PER_CLIP {
            return Err(Error::InvalidInput(format!(
                "need exactly {FRAMES_PER_CLIP} frames, got {}",
                frames.len()
            )));
        }
        if frames.iter().any(|f| f.width != FRAME_SIZE || f.height != FRAME_SIZE) {
            return Err(Error::InvalidInput(format!("frames must be {FRAME_SIZE}x{FRAME_SIZE}")));
        }
        Ok(FrameSequence { frames })
    }

    pub fn frames(&self) -> &[Raster] {
        &self.frames
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.frames.len(), FRAME_SIZE, FRAME_SIZE)
    }
}

/// Loads the first four `.pgm` files of `dir` in name order.
pub fn load_frames(dir: impl AsRef<Path>) -> Result<FrameSequence> {
    let dir = dir.as_ref();
    let paths = list_frames(dir)?;
    if paths.len() < FRAMES_PER_CLIP {
        return Err(Error::TooFewFrames {
            dir: dir.to_path_buf(),
            needed: FRAMES_PER_CLIP,
            found: paths.len(),
        });
    }
    let mut frames = Vec::with_capacity(FRAMES_PER_CLIP);
    for p in &paths[..FRAMES_PER_CLIP] {
        let r = load_pgm(p)?;
        if r.width != FRAME_SIZE || r.height != FRAME_SIZE {
            return Err(Error::WrongDimensions {
                path: p.clone(),
                width: r.width,
                height: r.height,
                expected_width: FRAME_SIZE,
                expected_height: FRAME_SIZE,
            });
        }
        frames.push(r);
    }
    FrameSequence::new(frames)
}

// ---------------------------------------------------------------------------
// Motion

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockMotion {
    pub dx: i32,
    pub dy: i32,
    /// Mean squared intensity difference at the chosen displacement.
    pub residual: f64,
}

/// Block displacements for each consecutive frame pair, `14 x 14` blocks
/// per pair in raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionFeatures {
    pub pairs: Vec<Vec<BlockMotion>>,
}

impl MotionFeatures {
    /// `(dx / r, dy / r, 10 * residual)` per block, pairs concatenated.
    pub fn to_vector(&self) -> Vec<f64> {
        let r = SEARCH_RADIUS as f64;
        self.pairs
            .iter()
            .flatten()
            .flat_map(|b| [b.dx as f64 / r, b.dy as f64 / r, 10.0 * b.residual])
            .collect()
    }
}

fn match_block(a: &Raster, b: &Raster, bx: usize, by: usize) -> BlockMotion {
    let (x0, y0) = ((bx * BLOCK_SIZE) as i32, (by * BLOCK_SIZE) as i32);
    let limit = (FRAME_SIZE - BLOCK_SIZE) as i32;
    let mut candidates = Vec::with_capacity(((2 * SEARCH_RADIUS + 1) * (2 * SEARCH_RADIUS + 1)) as usize);
    for dy in -SEARCH_RADIUS..=SEARCH_RADIUS {
        for dx in -SEARCH_RADIUS..=SEARCH_RADIUS {
            candidates.push((dx, dy));
        }
    }
    // Stable sort keeps raster order among equal magnitudes.
    candidates.sort_by_key(|&(dx, dy)| dx * dx + dy * dy);
    let mut best: Option<(f64, i32, i32)> = None;
    for (dx, dy) in candidates {
        let (x1, y1) = (x0 + dx, y0 + dy);
        if x1 < 0 || y1 < 0 || x1 > limit || y1 > limit {
            continue;
        }
        let mut sad = 0.0;
        for j in 0..BLOCK_SIZE {
            let ra = (y0 as usize + j) * FRAME_SIZE + x0 as usize;
            let rb = (y1 as usize + j) * FRAME_SIZE + x1 as usize;
            for i in 0..BLOCK_SIZE {
                sad += (a.data[ra + i] - b.data[rb + i]).abs();
            }
        }
        if best.is_none_or(|(s, _, _)| sad < s) {
            best = Some((sad, dx, dy));
        }
    }
    let (_, dx, dy) = best.expect("zero displacement is always in range");
    let (x1, y1) = ((x0 + dx) as usize, (y0 + dy) as usize);
    let mut sq = 0.0;
    for j in 0..BLOCK_SIZE {
        for i in 0..BLOCK_SIZE {
            let d = a.get(x0 as usize + i, y0 as usize + j) - b.get(x1 + i, y1 + j);
            sq += d * d;
        }
    }
    BlockMotion {
        dx,
        dy,
        residual: sq / (BLOCK_SIZE * BLOCK_SIZE) as f64,
    }
}

/// Exhaustive SAD block matching of every frame against the next.
pub fn motion_features(frames: &FrameSequence) -> MotionFeatures {
    let pairs = frames
        .frames
        .windows(2)
        .map(|w| {
            let mut blocks = Vec::with_capacity(BLOCK_GRID * BLOCK_GRID);
            for by in 0..BLOCK_GRID {
                for bx in 0..BLOCK_GRID {
                    blocks.push(match_block(&w[0], &w[1], bx, by));
                }
            }
            blocks
        })
        .collect();
    MotionFeatures { pairs }
}

// ---------------------------------------------------------------------------
// Rhythm

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RhythmTokens {
    pub tokens: Vec<usize>,
    pub levels: usize,
}

/// Max-normalises the envelope and buckets it into `levels` uniform bins.
pub fn rhythm_quantize(envelope: &[f64], levels: usize) -> Result<RhythmTokens> {
    if levels < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 rhythm levels, got {levels}")));
    }
    let max = envelope.iter().cloned().fold(0.0, f64::max);
    let tokens = envelope
        .iter()
        .map(|&v| {
            if max > 0.0 {
                ((v / max * levels as f64).floor() as usize).min(levels - 1)
            } else {
                0
            }
        })
        .collect();
    Ok(RhythmTokens { tokens, levels })
}

// ---------------------------------------------------------------------------
// Features

#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatures {
    /// `4 x 8 x 8` block means, centred on zero.
    pub pooled: Vec<f64>,
    pub motion: Vec<f64>,
}

impl VideoFeatures {
    pub fn new(frames: &FrameSequence, motion: &MotionFeatures) -> Self {
        let cell = FRAME_SIZE / POOL_GRID;
        let mut pooled = Vec::with_capacity(FRAMES_PER_CLIP * POOL_GRID * POOL_GRID);
        for f in &frames.frames {
            for gy in 0..POOL_GRID {
                for gx in 0..POOL_GRID {
                    let mut s = 0.0;
                    for y in gy * cell..(gy + 1) * cell {
                        for x in gx * cell..(gx + 1) * cell {
                            s += f.get(x, y);
                        }
                    }
                    pooled.push(s / (cell * cell) as f64 - 0.5);
                }
            }
        }
        VideoFeatures {
            pooled,
            motion: motion.to_vector(),
        }
    }

    pub fn from_frames(frames: &FrameSequence) -> Self {
        Self::new(frames, &motion_features(frames))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatures {
    /// `8 x 80` segment means of the log-mel frames.
    pub pooled_mel: Matrix,
    pub mean_mel: Vec<f64>,
    pub rhythm: RhythmTokens,
}

impl AudioFeatures {
    pub fn new(mel: &MelSpectrogram, rhythm: RhythmTokens) -> Result<Self> {
        if mel.bands() != MEL_BANDS || mel.frames() < MEL_SEGMENTS {
            return Err(Error::ShapeMismatch(format!("mel spectrogram of shape {:?}", mel.shape())));
        }
        if rhythm.tokens.is_empty() {
            return Err(Error::InvalidInput("empty rhythm token sequence".into()));
        }
        let frames = mel.frames();
        let mut pooled = Matrix::zeros(MEL_SEGMENTS, MEL_BANDS);
        for s in 0..MEL_SEGMENTS {
            let (lo, hi) = (s * frames / MEL_SEGMENTS, (s + 1) * frames / MEL_SEGMENTS);
            for t in lo..hi {
                for (acc, v) in pooled.row_mut(s).iter_mut().zip(mel.frame(t)) {
                    *acc += v / (hi - lo) as f64;
                }
            }
        }
        let mut mean_mel = vec![0.0; MEL_BANDS];
        for t in 0..frames {
            for (acc, v) in mean_mel.iter_mut().zip(mel.frame(t)) {
                *acc += v / frames as f64;
            }
        }
        Ok(AudioFeatures {
            pooled_mel: pooled,
            mean_mel,
            rhythm,
        })
    }

    /// Features of a 4 s clip at the analysis rate (mixed to mono).
    pub fn from_clip(clip: &AudioClip, levels: usize) -> Result<Self> {
        let mono = to_mono(clip);
        let mel = mel_spectrogram(&mono)?;
        let rhythm = rhythm_quantize(&onset_envelope(&mono)?, levels)?;
        Self::new(&mel, rhythm)
    }
}

// ---------------------------------------------------------------------------
// Encoders

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatcherConfig {
    pub dim: usize,
    pub margin: f64,
    pub levels: usize,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            dim: 64,
            margin: 0.2,
            levels: 16,
        }
    }
}

const V_FRAME_W: &str = "video.frame_w";
const V_FRAME_B: &str = "video.frame_b";
const V_MOTION_W: &str = "video.motion_w";
const V_MOTION_B: &str = "video.motion_b";
const V_OUT_W: &str = "video.out_w";
const V_OUT_B: &str = "video.out_b";
const M_QUERY_W: &str = "music.query_w";
const M_QUERY_B: &str = "music.query_b";
const M_KEY_EMB: &str = "music.key_emb";
const M_VALUE_EMB: &str = "music.value_emb";
const M_OUT_W: &str = "music.out_w";
const M_OUT_B: &str = "music.out_b";
const MATCHER_CONFIG: &str = "matcher.config";

pub fn video_pooled_len() -> usize {
    FRAMES_PER_CLIP * POOL_GRID * POOL_GRID
}

pub fn video_motion_len() -> usize {
    (FRAMES_PER_CLIP - 1) * BLOCK_GRID * BLOCK_GRID * 3
}

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-limit..limit))
}

/// Freshly initialised encoder parameters.
pub fn init_params(cfg: &MatcherConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.dim;
    let mut p = ParamStore::new();
    p.insert(V_FRAME_W, xavier(video_pooled_len(), d, &mut rng));
    p.insert(V_FRAME_B, Matrix::zeros(1, d));
    p.insert(V_MOTION_W, xavier(video_motion_len(), d, &mut rng));
    p.insert(V_MOTION_B, Matrix::zeros(1, d));
    p.insert(V_OUT_W, xavier(2 * d, d, &mut rng));
    p.insert(V_OUT_B, Matrix::zeros(1, d));
    p.insert(M_QUERY_W, xavier(MEL_BANDS, d, &mut rng));
    p.insert(M_QUERY_B, Matrix::zeros(1, d));
    p.insert(M_KEY_EMB, xavier(cfg.levels, d, &mut rng));
    p.insert(M_VALUE_EMB, xavier(cfg.levels, d, &mut rng));
    p.insert(M_OUT_W, xavier(d + MEL_BANDS, d, &mut rng));
    p.insert(M_OUT_B, Matrix::zeros(1, d));
    p
}

/// `z / sqrt(|z|^2 + eps)`, so an all-zero input maps to zero.
fn l2_normalize(z: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = (dot(z, z) + NORM_EPS).sqrt();
    if !n.is_finite() {
        return Err(Error::NonFinite("embedding with non-finite norm".into()));
    }
    Ok((z.iter().map(|v| v / n).collect(), n))
}

fn l2_normalize_backward(e: &[f64], norm: f64, de: &[f64]) -> Vec<f64> {
    let inner = dot(e, de);
    e.iter().zip(de).map(|(y, g)| (g - y * inner) / norm).collect()
}

fn bias(p: &ParamStore, name: &str) -> Result<Vec<f64>> {
    Ok(p.get(name)?.as_slice().to_vec())
}

/// Intermediate values kept for [`video_backward`].
#[derive(Debug, Clone)]
pub struct VideoCache {
    h_frame: Matrix,
    h_motion: Matrix,
    concat: Matrix,
    embedding: Vec<f64>,
    norm: f64,
}

pub fn video_forward(p: &ParamStore, f: &VideoFeatures) -> Result<(Vec<f64>, VideoCache)> {
    let xf = Matrix::row_vector(&f.pooled);
    let xm = Matrix::row_vector(&f.motion);
    let mut h_frame = linear(&xf, p.get(V_FRAME_W)?, &bias(p, V_FRAME_B)?)?;
    let mut h_motion = linear(&xm, p.get(V_MOTION_W)?, &bias(p, V_MOTION_B)?)?;
    for v in h_frame.as_mut_slice().iter_mut().chain(h_motion.as_mut_slice()) {
        *v = v.tanh();
    }
    let concat = Matrix::row_vector(&[h_frame.as_slice(), h_motion.as_slice()].concat());
    let z = linear(&concat, p.get(V_OUT_W)?, &bias(p, V_OUT_B)?)?;
    let (embedding, norm) = l2_normalize(z.as_slice())?;
    Ok((
        embedding.clone(),
        VideoCache {
            h_frame,
            h_motion,
            concat,
            embedding,
            norm,
        },
    ))
}

fn tanh_backward(h: &Matrix, dh: &[f64]) -> Matrix {
    let v: Vec<f64> = h.as_slice().iter().zip(dh).map(|(y, g)| g * (1.0 - y * y)).collect();
    Matrix::row_vector(&v)
}

/// Parameter gradients of `dot(d_embedding, embedding)`.
pub fn video_backward(p: &ParamStore, f: &VideoFeatures, c: &VideoCache, d_embedding: &[f64]) -> Result<Gradients> {
    let d = c.embedding.len();
    let dz = Matrix::row_vector(&l2_normalize_backward(&c.embedding, c.norm, d_embedding));
    let out = linear_backward(&c.concat, p.get(V_OUT_W)?, &dz)?;
    let dc = out.dx.as_slice();
    let dhf = tanh_backward(&c.h_frame, &dc[..d]);
    let dhm = tanh_backward(&c.h_motion, &dc[d..]);
    let gf = linear_backward(&Matrix::row_vector(&f.pooled), p.get(V_FRAME_W)?, &dhf)?;
    let gm = linear_backward(&Matrix::row_vector(&f.motion), p.get(V_MOTION_W)?, &dhm)?;
    Ok([
        (V_OUT_W.to_string(), out.dw),
        (V_OUT_B.to_string(), Matrix::row_vector(&out.db)),
        (V_FRAME_W.to_string(), gf.dw),
        (V_FRAME_B.to_string(), Matrix::row_vector(&gf.db)),
        (V_MOTION_W.to_string(), gm.dw),
        (V_MOTION_B.to_string(), Matrix::row_vector(&gm.db)),
    ]
    .into())
}

/// Intermediate values kept for [`music_backward`].
#[derive(Debug, Clone)]
pub struct MusicCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    attention: crate::nn::AttentionCache,
    query_pos: Vec<i64>,
    key_pos: Vec<i64>,
    concat: Matrix,
    embedding: Vec<f64>,
    norm: f64,
}

fn gather(table: &Matrix, tokens: &[usize]) -> Result<Matrix> {
    if let Some(&t) = tokens.iter().find(|&&t| t >= table.rows()) {
        return Err(Error::ShapeMismatch(format!(
            "rhythm token {t} outside a {}-level table",
            table.rows()
        )));
    }
    Ok(Matrix::from_fn(tokens.len(), table.cols(), |r, c| table.get(tokens[r], c)))
}

fn scatter_add(d_rows: &Matrix, tokens: &[usize], levels: usize) -> Matrix {
    let mut out = Matrix::zeros(levels, d_rows.cols());
    for (r, &t) in tokens.iter().enumerate() {
        for (acc, g) in out.row_mut(t).iter_mut().zip(d_rows.row(r)) {
            *acc += g;
        }
    }
    out
}

/// Mel segments attend over rhythm tokens; both sides carry rotary
/// positions on the token time axis.
pub fn music_forward(p: &ParamStore, f: &AudioFeatures) -> Result<(Vec<f64>, MusicCache)> {
    let tokens = &f.rhythm.tokens;
    let n_tok = tokens.len();
    let query_pos: Vec<i64> = (0..MEL_SEGMENTS)
        .map(|s| ((2 * s + 1) * n_tok / (2 * MEL_SEGMENTS)) as i64)
        .collect();
    let key_pos: Vec<i64> = (0..n_tok as i64).collect();
    let q0 = linear(&f.pooled_mel, p.get(M_QUERY_W)?, &bias(p, M_QUERY_B)?)?;
    let q = rope_rotate(&q0, &query_pos)?;
    let k = rope_rotate(&gather(p.get(M_KEY_EMB)?, tokens)?, &key_pos)?;
    let v = gather(p.get(M_VALUE_EMB)?, tokens)?;
    let (attended, attention) = cross_attention(&q, &k, &v)?;
    let d = attended.cols();
    let mut summary = vec![0.0; d];
    for r in 0..attended.rows() {
        for (acc, x) in summary.iter_mut().zip(attended.row(r)) {
            *acc += x / attended.rows() as f64;
        }
    }
    let concat = Matrix::row_vector(&[summary.as_slice(), f.mean_mel.as_slice()].concat());
    let z = linear(&concat, p.get(M_OUT_W)?, &bias(p, M_OUT_B)?)?;
    let (embedding, norm) = l2_normalize(z.as_slice())?;
    Ok((
        embedding.clone(),
        MusicCache {
            q,
            k,
            v,
            attention,
            query_pos,
            key_pos,
            concat,
            embedding,
            norm,
        },
    ))
}

/// Parameter gradients of `dot(d_embedding, embedding)`.
pub fn music_backward(p: &ParamStore, f: &AudioFeatures, c: &MusicCache, d_embedding: &[f64]) -> Result<Gradients> {
    let d = c.embedding.len();
    let levels = p.get(M_KEY_EMB)?.rows();
    let dz = Matrix::row_vector(&l2_normalize_backward(&c.embedding, c.norm, d_embedding));
    let out = linear_backward(&c.concat, p.get(M_OUT_W)?, &dz)?;
    let rows = c.q.rows();
    let d_summary = &out.dx.as_slice()[..d];
    let d_attended = Matrix::from_fn(rows, d, |_, j| d_summary[j] / rows as f64);
    let ag = cross_attention_backward(&c.q, &c.k, &c.v, &c.attention, &d_attended)?;
    let dq0 = rope_rotate_backward(&ag.dq, &c.query_pos)?;
    let dk0 = rope_rotate_backward(&ag.dk, &c.key_pos)?;
    let gq = linear_backward(&f.pooled_mel, p.get(M_QUERY_W)?, &dq0)?;
    Ok([
        (M_OUT_W.to_string(), out.dw),
        (M_OUT_B.to_string(), Matrix::row_vector(&out.db)),
        (M_QUERY_W.to_string(), gq.dw),
        (M_QUERY_B.to_string(), Matrix::row_vector(&gq.db)),
        (M_KEY_EMB.to_string(), scatter_add(&dk0, &f.rhythm.tokens, levels)),
        (M_VALUE_EMB.to_string(), scatter_add(&ag.dv, &f.rhythm.tokens, levels)),
    ]
    .into())
}

// ---------------------------------------------------------------------------
// Model

#[derive(Debug, Clone, PartialEq)]
pub struct MatcherModel {
    config: MatcherConfig,
    params: ParamStore,
}

impl MatcherModel {
    pub fn new(config: MatcherConfig, seed: u64) -> Result<Self> {
        if config.dim == 0 || config.dim % 2 != 0 {
            return Err(Error::InvalidInput("embedding dimension must be even and positive".into()));
        }
        if config.levels < 2 {
            return Err(Error::InvalidInput("need at least 2 rhythm levels".into()));
        }
        Ok(MatcherModel {
            params: init_params(&config, seed),
            config,
        })
    }

    pub fn config(&self) -> MatcherConfig {
        self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn embed_video_features(&self, f: &VideoFeatures) -> Result<Vec<f64>> {
        Ok(video_forward(&self.params, f)?.0)
    }

    pub fn embed_music_features(&self, f: &AudioFeatures) -> Result<Vec<f64>> {
        if f.rhythm.levels != self.config.levels {
            return Err(Error::ShapeMismatch(format!(
                "{} rhythm levels for a {}-level model",
                f.rhythm.levels, self.config.levels
            )));
        }
        Ok(music_forward(&self.params, f)?.0)
    }

    pub fn to_store(&self) -> ParamStore {
        let mut store = self.params.clone();
        let c = self.config;
        store.insert(
            MATCHER_CONFIG,
            Matrix::row_vector(&[c.dim as f64, c.margin, c.levels as f64]),
        );
        store
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let c = store.get(MATCHER_CONFIG)?.as_slice();
        if c.len() != 3 || c[0].fract() != 0.0 || c[2].fract() != 0.0 || c[0] < 2.0 || c[2] < 2.0 {
            return Err(Error::ModelFormat("bad matcher configuration record".into()));
        }
        let config = MatcherConfig {
            dim: c[0] as usize,
            margin: c[1],
            levels: c[2] as usize,
        };
        let mut model = MatcherModel::new(config, 0)?;
        let names: Vec<String> = model.params.names().map(str::to_string).collect();
        for name in names {
            let v = store.get(&name)?;
            if v.shape() != model.params.get(&name)?.shape() {
                return Err(Error::ModelFormat(format!("{name} has shape {:?}", v.shape())));
            }
            *model.params.get_mut(&name)? = v.clone();
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_store().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(&ParamStore::load(path)?)
    }
}

pub fn embed_video(frames: &FrameSequence, motion: &MotionFeatures, model: &MatcherModel) -> Result<Vec<f64>> {
    let f = VideoFeatures::new(frames, motion);
    if f.motion.len() != video_motion_len() {
        return Err(Error::ShapeMismatch("motion features of the wrong size".into()));
    }
    model.embed_video_features(&f)
}

pub fn embed_music(mel: &MelSpectrogram, rhythm: &RhythmTokens, model: &MatcherModel) -> Result<Vec<f64>> {
    model.embed_music_features(&AudioFeatures::new(mel, rhythm.clone())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Choice {
    A,
    B,
}

impl Choice {
    pub fn other(self) -> Choice {
        match self {
            Choice::A => Choice::B,
            Choice::B => Choice::A,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchOutcome {
    pub choice: Choice,
    pub distance_a: f64,
    pub distance_b: f64,
    /// The distances were exactly equal; the choice defaulted to A.
    pub tie: bool,
}

impl MatchOutcome {
    pub fn from_distances(distance_a: f64, distance_b: f64) -> Self {
        MatchOutcome {
            choice: if distance_b < distance_a { Choice::B } else { Choice::A },
            distance_a,
            distance_b,
            tie: distance_a == distance_b,
        }
    }
}

/// Anything that can pick which of two audio candidates fits a video.
pub trait PairMatcher {
    fn choose(&self, video: &VideoFeatures, a: &AudioFeatures, b: &AudioFeatures) -> Result<MatchOutcome>;
}

impl PairMatcher for MatcherModel {
    fn choose(&self, video: &VideoFeatures, a: &AudioFeatures, b: &AudioFeatures) -> Result<MatchOutcome> {
        let v = self.embed_video_features(video)?;
        let ea = self.embed_music_features(a)?;
        let eb = self.embed_music_features(b)?;
        Ok(MatchOutcome::from_distances(squared_distance(&v, &ea), squared_distance(&v, &eb)))
    }
}

/// Picks the candidate whose embedding is closer to the video's.
pub fn match_clips(
    frames: &FrameSequence,
    motion: &MotionFeatures,
    audio_a: &AudioClip,
    audio_b: &AudioClip,
    model: &MatcherModel,
) -> Result<MatchOutcome> {
    let levels = model.config.levels;
    model.choose(
        &VideoFeatures::new(frames, motion),
        &AudioFeatures::from_clip(audio_a, levels)?,
        &AudioFeatures::from_clip(audio_b, levels)?,
    )
}

/// A video with its paired audio and a non-paired one.
#[derive(Debug, Clone)]
pub struct MatchCase {
    pub video: VideoFeatures,
    pub positive: AudioFeatures,
    pub negative: AudioFeatures,
}

/// Fraction of cases where the positive is chosen. The positive is shown
/// as candidate A on even cases and B on odd ones.
pub fn matching_accuracy(matcher: &impl PairMatcher, cases: &[MatchCase]) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    let mut correct = 0usize;
    for (i, c) in cases.iter().enumerate() {
        let (a, b, want) = if i % 2 == 0 {
            (&c.positive, &c.negative, Choice::A)
        } else {
            (&c.negative, &c.positive, Choice::B)
        };
        if matcher.choose(&c.video, a, b)?.choice == want {
            correct += 1;
        }
    }
    Ok(correct as f64 / cases.len() as f64)
}

/// Builds match cases from a manifest whose entries carry frames: the
/// video-audio reference is the positive, the overlaid BGM the negative.
pub fn load_match_cases(manifest: &MixManifest, root: &Path, levels: usize) -> Result<Vec<MatchCase>> {
    use rayon::prelude::*;
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let dir = e
                .frames_dir
                .as_ref()
                .ok_or_else(|| Error::Manifest(format!("{} has no frames", e.clip_id)))?;
            Ok(MatchCase {
                video: VideoFeatures::from_frames(&load_frames(root.join(dir))?),
                positive: AudioFeatures::from_clip(&load_wav(root.join(&e.ost_ref))?, levels)?,
                negative: AudioFeatures::from_clip(&load_wav(root.join(&e.bgm_ref))?, levels)?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq)]
pub struct MatcherTrainConfig {
    pub model: MatcherConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for MatcherTrainConfig {
    fn default() -> Self {
        MatcherTrainConfig {
            model: MatcherConfig::default(),
            epochs: 30,
            batch_size: 16,
            learning_rate: 2e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedMatcher {
    pub model: MatcherModel,
    /// Mean triplet loss before any update, then after each epoch.
    pub loss_curve: Vec<f64>,
}

/// Triplet loss of one case and its parameter gradients.
pub fn triplet_objective(p: &ParamStore, c: &MatchCase, margin: f64) -> Result<(f64, Gradients)> {
    let (a, va) = video_forward(p, &c.video)?;
    let (pos, vp) = music_forward(p, &c.positive)?;
    let (neg, vn) = music_forward(p, &c.negative)?;
    let t = triplet_loss(&a, &pos, &neg, margin)?;
    let mut grads = video_backward(p, &c.video, &va, &t.grad_anchor)?;
    for (g, f, cache) in [(&t.grad_positive, &c.positive, &vp), (&t.grad_negative, &c.negative, &vn)] {
        for (name, m) in music_backward(p, f, cache, g)? {
            match grads.get_mut(&name) {
                Some(acc) => acc.add_assign(&m)?,
                None => {
                    grads.insert(name, m);
                }
            }
        }
    }
    Ok((t.loss, grads))
}

fn mean_triplet_loss(p: &ParamStore, cases: &[MatchCase], margin: f64) -> Result<f64> {
    let mut total = 0.0;
    for c in cases {
        let a = video_forward(p, &c.video)?.0;
        let pos = music_forward(p, &c.positive)?.0;
        let neg = music_forward(p, &c.negative)?.0;
        total += triplet_loss(&a, &pos, &neg, margin)?.loss;
    }
    let mean = total / cases.len() as f64;
    if !mean.is_finite() {
        return Err(Error::NonFinite(format!("triplet loss {mean}")));
    }
    Ok(mean)
}

/// Mini-batch Adam on the triplet loss. Single-threaded and
/// bit-reproducible for a given seed.
pub fn train_matcher_on(cases: &[MatchCase], cfg: &MatcherTrainConfig, seed: u64) -> Result<TrainedMatcher> {
    if cases.is_empty() {
        return Err(Error::InvalidInput("no training triplets".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    let mut model = MatcherModel::new(cfg.model, seed)?;
    let margin = cfg.model.margin;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_7463_6865_72);
    let mut curve = vec![mean_triplet_loss(&model.params, cases, margin)?];
    info!("matcher epoch 0: loss {:.6}", curve[0]);
    let mut order: Vec<usize> = (0..cases.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Vec::with_capacity(batch.len());
            for &i in batch {
                grads.push(triplet_objective(&model.params, &cases[i], margin)?.1);
            }
            model.params.zero_grads();
            for g in &grads {
                model.params.accumulate_all(g)?;
            }
            model.params.scale_grads(1.0 / batch.len() as f64);
            model.params.adam_step(cfg.learning_rate, AdamConfig::default());
        }
        let loss = mean_triplet_loss(&model.params, cases, margin)?;
        info!("matcher epoch {epoch}: loss {loss:.6}");
        curve.push(loss);
    }
    Ok(TrainedMatcher { model, loss_curve: curve })
}

/// Trains on every entry of a manifest that carries frames.
pub fn train_matcher(manifest: &MixManifest, root: &Path, cfg: &MatcherTrainConfig, seed: u64) -> Result<TrainedMatcher> {
    let cases = load_match_cases(manifest, root, cfg.model.levels)?;
    train_matcher_on(&cases, cfg, seed)
}

/// Mean anchor-positive and anchor-negative squared distances.
pub fn mean_distances(model: &MatcherModel, cases: &[MatchCase]) -> Result<(f64, f64)> {
    let (mut dp, mut dn) = (0.0, 0.0);
    for c in cases {
        let a = model.embed_video_features(&c.video)?;
        dp += squared_distance(&a, &model.embed_music_features(&c.positive)?);
        dn += squared_distance(&a, &model.embed_music_features(&c.negative)?);
    }
    let n = cases.len().max(1) as f64;
    Ok((dp / n, dn / n))
}
