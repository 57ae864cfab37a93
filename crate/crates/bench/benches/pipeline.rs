use std::path::Path;

use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use failforge_core::episode::load_corpus;
use failforge_core::eval::confusion_matrix;
use failforge_core::exec_perturb::generate_execution_samples;
use failforge_core::gateway::{compose_grid, encode_png, GridCell};
use failforge_core::plan_perturb::generate_planning_samples;
use failforge_core::protocol::parse_verdict;
use failforge_core::{Category, Episode, GenConfig, Kind, Lexicon};
use image::{Rgba, RgbaImage};

fn corpus() -> Vec<Episode> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/corpus");
    load_corpus(&dir).expect("fixture corpus")
}

fn generation(c: &mut Criterion) {
    let corpus = corpus();
    let lex = Lexicon::seed();
    let mut g = c.benchmark_group("generate");
    g.bench_function("planning_200", |b| {
        b.iter(|| generate_planning_samples(&corpus, &GenConfig::new(black_box(7), 200), &lex, None).unwrap())
    });
    g.bench_function("execution_200", |b| {
        b.iter(|| generate_execution_samples(&corpus, &GenConfig::new(black_box(7), 200), &lex, None, &[]).unwrap())
    });
    g.finish();
}

fn verdicts(c: &mut Criterion) {
    let reply = "The gripper closes around the mug but the end view shows it back on the table.\n\
                 The object never left the surface.\nANSWER: failure | CATEGORY: no_progress";
    c.bench_function("parse_verdict", |b| {
        b.iter(|| parse_verdict(black_box(reply), Kind::Execution))
    });
}

fn grid(c: &mut Criterion) {
    let cells: Vec<GridCell> = (0..4)
        .flat_map(|v| {
            (0..2).map(move |t| GridCell {
                view_id: format!("cam{v}"),
                timestep: t,
                image: RgbaImage::from_pixel(256, 256, Rgba([v as u8 * 40, t as u8 * 90, 7, 255])),
            })
        })
        .collect();
    let mut g = c.benchmark_group("grid");
    g.bench_function("compose_4x2_256", |b| {
        b.iter_batched(
            || cells.clone(),
            |cells| compose_grid(&cells, 4, 2).unwrap(),
            BatchSize::SmallInput,
        )
    });
    let composed = compose_grid(&cells, 4, 2).unwrap();
    g.bench_function("encode_png_512x1024", |b| {
        b.iter(|| encode_png(black_box(&composed)).unwrap())
    });
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let classes: Vec<&str> = Category::ALL.iter().map(|c| c.slug()).collect();
    let golds: Vec<&str> = (0..10_000).map(|i| classes[i % classes.len()]).collect();
    let preds: Vec<&str> = (0..10_000).map(|i| classes[(i * 7 + i / 3) % classes.len()]).collect();
    c.bench_function("confusion_matrix_10k", |b| {
        b.iter(|| confusion_matrix(black_box(&golds), black_box(&preds), &classes).unwrap())
    });
}

criterion_group!(benches, generation, verdicts, grid, metrics);
criterion_main!(benches);
