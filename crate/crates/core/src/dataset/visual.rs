//! Patch-grid scenes: G×G cells holding colored shapes, their token
//! encoding, and a PNG rendering for documentation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{Category, CountingSample, Question, Role, SceneConfig, Span, TextTaskConfig, VisualScene};
use crate::error::{Error, Result};
use crate::util::subseed;
use crate::vocab::{TokenId, Vocabulary, COLORS, SHAPES};

/// Grid sizes scenes come in.
pub const GRID_SIZES: [usize; 3] = [3, 6, 10];

/// (shape, color) pairs excluded from training scenes per category.
pub fn held_out_pairs(category: Category) -> [(usize, usize); 2] {
    match category {
        // (circle, cyan), (star, red)
        Category::Monotypic => [(0, 7), (5, 2)],
        // (square, purple), (heart, green)
        Category::PolytypicReplicate => [(2, 6), (8, 1)],
        // (triangle, brown), (diamond, yellow)
        Category::PolytypicUnique => [(1, 5), (6, 3)],
    }
}

/// Places `count` objects at distinct random cells by sampling-and-rejection.
pub fn generate_scene(config: &SceneConfig) -> Result<VisualScene> {
    if config.count == 0 || config.count > 9 {
        return Err(Error::Config(format!(
            "object count must be 1..=9, got {}",
            config.count
        )));
    }
    if !GRID_SIZES.contains(&config.grid_size) {
        return Err(Error::Config(format!(
            "grid size must be one of {GRID_SIZES:?}, got {}",
            config.grid_size
        )));
    }
    let n_cells = config.grid_size * config.grid_size;
    if config.count > n_cells {
        return Err(Error::Config(format!(
            "{} objects cannot fit a {g}×{g} grid",
            config.count,
            g = config.grid_size
        )));
    }
    if config.category != Category::Monotypic && config.count < 2 {
        return Err(Error::Config(format!(
            "{:?} scenes need at least 2 objects, got count {}",
            config.category, config.count
        )));
    }
    let pairs = sample_pairs(config);
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(config.seed, "dataset/cells"));
    let mut cells: Vec<Option<(usize, usize)>> = vec![None; n_cells];
    for pair in pairs {
        loop {
            let cell = rng.random_range(0..n_cells);
            if cells[cell].is_none() {
                cells[cell] = Some(pair);
                break;
            }
        }
    }
    Ok(VisualScene {
        config: *config,
        cells,
    })
}

fn sample_pairs(config: &SceneConfig) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(config.seed, "dataset/pairs"));
    let n_pairs = SHAPES.len() * COLORS.len();
    let pair = |k: usize| (k / COLORS.len(), k % COLORS.len());
    match config.category {
        Category::Monotypic => {
            let p = pair(rng.random_range(0..n_pairs));
            vec![p; config.count]
        }
        Category::PolytypicReplicate => loop {
            let picks: Vec<(usize, usize)> = (0..config.count)
                .map(|_| pair(rng.random_range(0..n_pairs)))
                .collect();
            let mut distinct: Vec<_> = picks.clone();
            distinct.sort_unstable();
            distinct.dedup();
            if distinct.len() >= 2 {
                break picks;
            }
        },
        Category::PolytypicUnique => {
            let mut pool: Vec<usize> = (0..n_pairs).collect();
            for i in 0..config.count {
                let j = rng.random_range(i..n_pairs);
                pool.swap(i, j);
            }
            pool.truncate(config.count);
            pool.into_iter().map(pair).collect()
        }
    }
}

/// Encodes a scene as patch tokens in row-major order plus the counting
/// question. Question-first realizes the task-description-prefix emulation:
/// the question tokens precede the patch region.
pub fn scene_to_tokens(
    vocab: &Vocabulary,
    scene: &VisualScene,
    prompt: &TextTaskConfig,
) -> Result<CountingSample> {
    let queried = match prompt.question {
        Question::General => None,
        Question::Specific => {
            let mut present: Vec<(usize, usize)> =
                scene.cells.iter().flatten().copied().collect();
            present.sort_unstable();
            present.dedup();
            let mut rng = ChaCha8Rng::seed_from_u64(subseed(prompt.seed, "dataset/queried"));
            Some(present[rng.random_range(0..present.len())])
        }
    };
    let ground_truth = match queried {
        Some(q) => scene.cells.iter().flatten().filter(|&&p| p == q).count(),
        None => scene.config.count,
    };

    let context: Vec<(TokenId, Role)> = scene
        .cells
        .iter()
        .map(|cell| match *cell {
            None => (vocab.background_id, Role::Patch),
            Some((s, c)) => {
                let role = match queried {
                    Some(q) if (s, c) != q => Role::Distractor,
                    _ => Role::Item,
                };
                (vocab.patch_id(s, c), role)
            }
        })
        .collect();

    let question = visual_question(vocab, queried)?;
    let mut sample = super::text::assemble(
        vocab,
        &context,
        &question,
        prompt.order,
        ground_truth,
        json!({"kind": "visual", "scene": scene.config, "order": prompt.order, "question": prompt.question}),
        scene.config.seed,
    );
    sample.scene = Some(scene.clone());
    Ok(sample)
}

/// "How many objects|<color> <shapes> are there in the image?"
fn visual_question(vocab: &Vocabulary, queried: Option<(usize, usize)>) -> Result<Vec<TokenId>> {
    let w = |s: &str| vocab.lookup(s);
    let mut toks = vec![w("How")?, w("many")?];
    match queried {
        None => toks.push(w("objects")?),
        Some((s, c)) => {
            toks.push(vocab.color_ids[c]);
            toks.push(vocab.shape_plural_ids[s]);
        }
    }
    toks.extend([w("are")?, w("there")?, w("in")?, w("the")?, w("image?")?]);
    Ok(toks)
}

/// The absolute token positions of the patch region in a visual sample.
pub fn patch_region(sample: &CountingSample) -> Result<Span> {
    if sample.scene.is_none() {
        return Err(Error::Input("sample has no patch region".into()));
    }
    Ok(sample.context_span)
}

// ─── PNG rendering ─────────────────────────────────────────────────────────

/// RGB for each color word, same order as [`COLORS`].
#[cfg(feature = "png")]
const COLOR_RGB: [[u8; 3]; 8] = [
    [45, 90, 220],   // blue
    [50, 160, 70],   // green
    [220, 55, 50],   // red
    [240, 200, 40],  // yellow
    [245, 140, 30],  // orange
    [140, 95, 45],   // brown
    [150, 65, 200],  // purple
    [45, 195, 220],  // cyan
];

/// Renders the scene to a PNG, one glyph per occupied cell. The exact pixel
/// layout is for human inspection only and is not contractual.
#[cfg(feature = "png")]
pub fn scene_to_png(scene: &VisualScene, path: &std::path::Path) -> Result<()> {
    const CELL: u32 = 40;
    let g = scene.config.grid_size as u32;
    let side = g * CELL;
    let mut img = image::RgbImage::from_pixel(side, side, image::Rgb([245, 245, 245]));
    // Grid lines.
    for k in 0..=g {
        for t in 0..side {
            let line = (k * CELL).min(side - 1);
            img.put_pixel(t, line, image::Rgb([215, 215, 215]));
            img.put_pixel(line, t, image::Rgb([215, 215, 215]));
        }
    }
    for (idx, cell) in scene.cells.iter().enumerate() {
        let Some((shape, color)) = cell else { continue };
        let (row, col) = (idx as u32 / g, idx as u32 % g);
        let rgb = image::Rgb(COLOR_RGB[*color]);
        for py in 0..CELL {
            for px in 0..CELL {
                // Normalized cell coordinates in [-1, 1], y pointing up.
                let u = (px as f64 + 0.5) / CELL as f64 * 2.0 - 1.0;
                let v = 1.0 - (py as f64 + 0.5) / CELL as f64 * 2.0;
                if glyph_mask(*shape, u, v) {
                    img.put_pixel(col * CELL + px, row * CELL + py, rgb);
                }
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::Format(format!("png encoding failed: {e}")))
}

/// True when normalized point (u, v) lies inside the glyph for `shape`.
#[cfg(feature = "png")]
fn glyph_mask(shape: usize, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    let in_regular = |sides: f64, radius: f64, rot: f64| {
        if r < 1e-9 {
            return true;
        }
        let theta = v.atan2(u) - rot;
        let sector = std::f64::consts::TAU / sides;
        let a = theta.rem_euclid(sector) - sector / 2.0;
        r * a.cos() <= radius * (sector / 2.0).cos()
    };
    match SHAPES[shape] {
        "circle" => r <= 0.8,
        "triangle" => in_regular(3.0, 0.85, std::f64::consts::FRAC_PI_2),
        "square" => u.abs() <= 0.72 && v.abs() <= 0.72,
        "pentagon" => in_regular(5.0, 0.85, std::f64::consts::FRAC_PI_2),
        "hexagon" => in_regular(6.0, 0.85, 0.0),
        "star" => {
            // Five points: outer radius on the spikes, inner between them.
            let theta = v.atan2(u) - std::f64::consts::FRAC_PI_2;
            let sector = std::f64::consts::TAU / 5.0;
            let a = (theta.rem_euclid(sector) - sector / 2.0).abs() / (sector / 2.0);
            r <= 0.35 + 0.55 * (1.0 - a)
        }
        "diamond" => u.abs() + v.abs() <= 0.85,
        "cross" => (u.abs() <= 0.28 && v.abs() <= 0.82) || (v.abs() <= 0.28 && u.abs() <= 0.82),
        "heart" => {
            let (x, y) = (u / 0.9, v / 0.9 + 0.25);
            let q = x * x + y * y - 0.45;
            q * q * q - x * x * y * y * y <= 0.0
        }
        _ => unreachable!(),
    }
}
