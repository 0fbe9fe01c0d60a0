#![allow(dead_code)]

use std::collections::HashMap;
use std::path::Path;

use cirkit::annotations::QueryAnnotation;
use cirkit::pipeline::{EmbeddingSources, MemoryImageSource};
use cirkit::store::{write_index, Embedding, GalleryIndex};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DIM: usize = 16;
pub const GALLERY: usize = 50;
pub const QUERIES: usize = 10;

/// 50 random gallery vectors and 10 queries. Query `i` has reference
/// `g{5i}` and a single planted target `g{5i+2}`; its modification text and
/// caption point towards the target with noise, so targets land in the top
/// 16 but not always first.
pub struct Synthetic {
    pub sources: EmbeddingSources,
    pub queries: Vec<QueryAnnotation>,
    pub images: MemoryImageSource,
}

pub fn gid(i: usize) -> String {
    format!("g{i:02}")
}

fn random_vec(rng: &mut ChaCha8Rng, scale: f32) -> Vec<f32> {
    (0..DIM).map(|_| rng.random_range(-1.0f32..1.0) * scale).collect()
}

fn emb(v: Vec<f32>) -> Embedding {
    Embedding::new(v).unwrap()
}

/// A distinct solid color per gallery index.
pub fn color(i: usize) -> Rgb<u8> {
    Rgb([(i * 5) as u8, (255 - i * 3) as u8, ((i * 37) % 256) as u8])
}

pub fn synthetic() -> Synthetic {
    let mut rng = ChaCha8Rng::seed_from_u64(20240611);
    let gallery_vecs: Vec<Vec<f32>> = (0..GALLERY).map(|_| random_vec(&mut rng, 1.0)).collect();
    let gallery =
        GalleryIndex::from_records(DIM, gallery_vecs.iter().enumerate().map(|(i, v)| (gid(i), emb(v.clone())))).unwrap();

    let mut texts = Vec::new();
    let mut captions = Vec::new();
    let mut queries = Vec::new();
    for q in 0..QUERIES {
        let (r, t) = (5 * q, 5 * q + 2);
        let noise = random_vec(&mut rng, 2.0);
        let text: Vec<f32> = (0..DIM)
            .map(|d| gallery_vecs[t][d] - 0.4 * gallery_vecs[r][d] + noise[d])
            .collect();
        let cnoise = random_vec(&mut rng, 2.5);
        let cap: Vec<f32> = (0..DIM).map(|d| gallery_vecs[t][d] + cnoise[d]).collect();
        let qid = format!("q{q}");
        texts.push((qid.clone(), emb(text)));
        captions.push((qid.clone(), emb(cap)));
        queries.push(QueryAnnotation {
            query_id: qid,
            reference_id: gid(r),
            modification_text: format!("turn {} into {}", gid(r), gid(t)),
            target_ids: vec![gid(t)],
            subset_ids: Some((0..6).map(|j| gid((t + 7 * j) % GALLERY)).collect()),
            group: Some(if q % 2 == 0 { "even" } else { "odd" }.into()),
        });
    }
    let mut sources = EmbeddingSources::new(gallery, GalleryIndex::from_records(DIM, texts).unwrap());
    sources.captions = Some(GalleryIndex::from_records(DIM, captions).unwrap());
    let images = MemoryImageSource(
        (0..GALLERY)
            .map(|i| (gid(i), RgbImage::from_pixel(12, 9, color(i))))
            .collect::<HashMap<_, _>>(),
    );
    Synthetic {
        sources,
        queries,
        images,
    }
}

impl Synthetic {
    /// Writes embeddings, PNG images and generic annotations under `dir`.
    pub fn write_to(&self, dir: &Path) {
        std::fs::create_dir_all(dir.join("images")).unwrap();
        write_index(&self.sources.gallery, dir.join("gallery.sqemb")).unwrap();
        write_index(&self.sources.texts, dir.join("texts.sqemb")).unwrap();
        write_index(self.sources.captions.as_ref().unwrap(), dir.join("captions.sqemb")).unwrap();
        for (id, img) in &self.images.0 {
            img.save(dir.join("images").join(format!("{id}.png"))).unwrap();
        }
        std::fs::write(
            dir.join("queries.json"),
            serde_json::to_vec_pretty(&self.queries).unwrap(),
        )
        .unwrap();
    }
}
