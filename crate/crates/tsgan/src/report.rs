//! Image grids: top-10 retrievals per probe and real/generated images.

use tsgan_core::datasets::{build_protocol_split, Dataset};
use tsgan_core::eval::{distance_matrix, extract_features, ranking, EvalProtocol};
use tsgan_core::graph::Graph;
use tsgan_core::image::{denormalize, Modality, PersonImage};
use tsgan_core::networks::{Generator, StudentBackbone};
use tsgan_core::nn::NormMode;
use tsgan_core::seed::{self, Stream};
use tsgan_core::Tensor;

use crate::error::{CliError, Result};
use crate::png_io::RawImage;

pub const TOP_K: usize = 10;
const BORDER: usize = 2;
const QUERY: [u8; 3] = [255, 255, 255];
const HIT: [u8; 3] = [0, 200, 0];
const MISS: [u8; 3] = [220, 0, 0];
const PLAIN: [u8; 3] = [40, 40, 40];

/// RGB canvas of equally sized tiles, each framed by a coloured border.
struct Canvas {
    tile_h: usize,
    tile_w: usize,
    cols: usize,
    image: RawImage,
}

impl Canvas {
    fn new(rows: usize, cols: usize, (h, w): (usize, usize)) -> Self {
        let (tile_h, tile_w) = (h + 2 * BORDER, w + 2 * BORDER);
        Self {
            tile_h,
            tile_w,
            cols,
            image: RawImage {
                channels: 3,
                height: rows * tile_h,
                width: cols * tile_w,
                data: vec![0; rows * tile_h * cols * tile_w * 3],
            },
        }
    }

    /// `pixels` is `[c, h, w]` in [-1, 1]; grey images are replicated.
    fn put(&mut self, row: usize, col: usize, pixels: &Tensor, frame: [u8; 3]) {
        debug_assert!(col < self.cols);
        let shape = pixels.shape();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let bytes = denormalize(pixels.data());
        let (y0, x0) = (row * self.tile_h, col * self.tile_w);
        let width = self.image.width;
        for ty in 0..self.tile_h {
            for tx in 0..self.tile_w {
                let at = ((y0 + ty) * width + x0 + tx) * 3;
                let inside = (BORDER..BORDER + h).contains(&ty) && (BORDER..BORDER + w).contains(&tx);
                let px = if inside {
                    let i = (ty - BORDER) * w + tx - BORDER;
                    [0, 1, 2].map(|ch| bytes[(if c == 1 { 0 } else { ch }) * h * w + i])
                } else {
                    frame
                };
                self.image.data[at..at + 3].copy_from_slice(&px);
            }
        }
    }
}

/// One row per probe of the first gallery draw: the probe, then its ten
/// nearest gallery images framed green when they share its identity and
/// red otherwise. Excluded gallery cameras are skipped, as in scoring.
pub fn retrieval_grid(
    net: &StudentBackbone,
    dataset: &Dataset,
    protocol: &EvalProtocol,
    seed: u64,
    queries: usize,
) -> Result<RawImage> {
    let mut rng = seed::rng(seed, Stream::Protocol, &[protocol.mode as u64, protocol.shot as u64, 0]);
    let split = build_protocol_split(dataset, protocol.mode, protocol.shot, &mut rng)?;
    let items = dataset.items();
    let pick = |idx: &[usize]| idx.iter().map(|&i| &items[i]).collect::<Vec<&PersonImage>>();
    let query: Vec<&PersonImage> = pick(&split.query).into_iter().take(queries).collect();
    let gallery = pick(&split.gallery);
    if query.is_empty() {
        return Err(CliError::Data("no probes for the retrieval grid".into()));
    }
    let qf = extract_features(net, &query, 64, protocol.normalize_features)?;
    let gf = extract_features(net, &gallery, 64, protocol.normalize_features)?;
    let dist = distance_matrix(&qf, &gf)?;
    let ng = gallery.len();
    let mut canvas = Canvas::new(query.len(), TOP_K + 1, dataset.resolution());
    for (r, q) in query.iter().enumerate() {
        canvas.put(r, 0, &q.pixels, QUERY);
        let order = ranking(&dist.data()[r * ng..(r + 1) * ng]);
        let kept = order.into_iter().filter(|&g| !protocol.exclusion.excludes(q.camera, gallery[g].camera));
        for (c, g) in kept.take(TOP_K).enumerate() {
            let frame = if gallery[g].identity == q.identity { HIT } else { MISS };
            canvas.put(r, c + 1, &gallery[g].pixels, frame);
        }
    }
    Ok(canvas.image)
}

fn translate(gen: &Generator, images: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let b = gen.params().bind(&mut g, false, NormMode::Eval);
    let y = gen.forward(&mut g, &b, x)?;
    Ok(g.value(y).clone())
}

fn first_per_identity(dataset: &Dataset, modality: Modality, n: usize) -> Result<Tensor> {
    let items = dataset.items();
    let picked: Vec<Tensor> = dataset
        .by_identity(modality)
        .iter()
        .filter_map(|idx| idx.first())
        .take(n)
        .map(|&i| {
            let (h, w) = items[i].resolution();
            items[i].pixels.clone().reshape(&[1, modality.channels(), h, w]).expect("same element count")
        })
        .collect();
    if picked.is_empty() {
        return Err(CliError::Data(format!("no {modality} images for the generation grid")));
    }
    Ok(Tensor::concat_outer(&picked.iter().collect::<Vec<_>>())?)
}

/// One row per identity: real RGB, generated IR, RGB reconstructed from
/// it, then real IR, generated RGB, IR reconstructed from it.
pub fn generation_grid(gen_ir: &Generator, gen_rgb: &Generator, dataset: &Dataset, rows: usize) -> Result<RawImage> {
    let rgb = first_per_identity(dataset, Modality::Rgb, rows)?;
    let ir = first_per_identity(dataset, Modality::Ir, rows)?;
    let fake_ir = translate(gen_ir, &rgb)?;
    let cycled_rgb = translate(gen_rgb, &fake_ir)?;
    let fake_rgb = translate(gen_rgb, &ir)?;
    let cycled_ir = translate(gen_ir, &fake_rgb)?;
    let columns = [&rgb, &fake_ir, &cycled_rgb, &ir, &fake_rgb, &cycled_ir];
    let n = rgb.shape()[0].min(ir.shape()[0]);
    let mut canvas = Canvas::new(n, columns.len(), dataset.resolution());
    for r in 0..n {
        for (c, t) in columns.iter().enumerate() {
            let one = t.slice_outer(r, 1)?;
            let shape = one.shape()[1..].to_vec();
            canvas.put(r, c, &one.reshape(&shape)?, PLAIN);
        }
    }
    Ok(canvas.image)
}
