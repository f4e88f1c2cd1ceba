//! Hot-path benchmarks at the default experiment scale (1024-point
//! clouds, 9 classes): neighbor search, affinity-graph construction, the
//! plain forward pass, the graph regularizer, and one fully
//! differentiated training objective on a smaller cloud.

use criterion::{criterion_group, criterion_main, Criterion};
use geot_core::backbone::{self, BackboneConfig};
use geot_core::clgs::{class_prior_t, fuse_t, init_clgs_params};
use geot_core::cloudgen::{generate_arch, ArchSpec, PointCloud};
use geot_core::diffcore::{forward_backward, ParamStore, Tape, VarId};
use geot_core::knn::knn_neighbor_lists;
use geot_core::objective::{corrected_focal_loss_t, focal_loss_t, FOCAL_GAMMA};
use geot_core::plgr::{build_graphs, plgr_loss, plgr_loss_t, AffinityGraph};
use geot_core::transition::{estimate_idtm, estimate_idtm_t, init_transition_params};
use geot_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

const CLASSES: usize = 9;

fn cloud(n_points: usize, seed: u64) -> PointCloud {
    generate_arch(&ArchSpec {
        n_points,
        seed,
        ..ArchSpec::default()
    })
    .expect("valid spec")
}

fn model_store(bb: &BackboneConfig) -> ParamStore {
    let mut store = ParamStore::new();
    bb.init_params(CLASSES, &mut store).expect("init");
    init_transition_params(CLASSES, &mut store).expect("init");
    init_clgs_params(&mut store, CLASSES).expect("init");
    store
}

fn bench_knn(c: &mut Criterion) {
    let cloud = cloud(1024, 1);
    c.bench_function("knn_lists_1024_k8", |b| {
        b.iter(|| knn_neighbor_lists(cloud.coords(), 8))
    });
}

fn bench_graph_build(c: &mut Criterion) {
    let cloud = cloud(1024, 2);
    let labels = cloud.labels().expect("labeled").to_vec();
    c.bench_function("affinity_graphs_1024", |b| {
        b.iter(|| build_graphs(cloud.coords(), &labels, 8, 8, 1.0).expect("graphs"))
    });
}

fn bench_forward(c: &mut Criterion) {
    let cloud = cloud(1024, 3);
    let bb = BackboneConfig::default();
    let store = model_store(&bb);
    c.bench_function("seg_forward_1024", |b| {
        b.iter(|| backbone::seg_forward(&store, cloud.coords(), &bb, CLASSES).expect("forward"))
    });
}

fn bench_regularizer(c: &mut Criterion) {
    let cloud = cloud(1024, 4);
    let labels = cloud.labels().expect("labeled").to_vec();
    let (gi, ge) = build_graphs(cloud.coords(), &labels, 8, 8, 1.0).expect("graphs");
    let bb = BackboneConfig::default();
    let store = model_store(&bb);
    let probs = backbone::seg_forward(&store, cloud.coords(), &bb, CLASSES).expect("forward");
    let field = estimate_idtm(&store, &probs).expect("transition field");
    c.bench_function("plgr_loss_1024", |b| {
        b.iter(|| plgr_loss(&field, &gi, &ge).expect("loss"))
    });
}

/// The combined objective on one labeled and one pseudo-labeled cloud,
/// forward and backward.
fn objective(
    store: &ParamStore,
    bb: &BackboneConfig,
    labeled: &PointCloud,
    unlabeled: &PointCloud,
    targets: &[usize],
    graphs: &(AffinityGraph, AffinityGraph),
    tape: &mut Tape,
) -> Result<VarId> {
    let nb = backbone::feature_neighbors(labeled.coords(), bb);
    let p = backbone::seg_forward_t(tape, store, labeled.coords(), &nb, bb, CLASSES)?;
    let ls = focal_loss_t(tape, p, labeled.labels().expect("labeled"), FOCAL_GAMMA)?;

    let nb = backbone::feature_neighbors(unlabeled.coords(), bb);
    let p = backbone::seg_forward_t(tape, store, unlabeled.coords(), &nb, bb, CLASSES)?;
    let ti = estimate_idtm_t(tape, store, p, CLASSES)?;
    let prior = class_prior_t(tape, store, CLASSES)?;
    let tf = fuse_t(tape, ti, prior, 0.9)?;
    let lu = corrected_focal_loss_t(tape, p, tf, targets, FOCAL_GAMMA)?;
    let (gi, ge) = graphs;
    let (_, _, lm) = plgr_loss_t(tape, ti, gi, ge)?;

    let wu = tape.scale(lu, 1.0);
    let wm = tape.scale(lm, 0.1);
    let partial = tape.add(ls, wu)?;
    tape.add(partial, wm)
}

fn bench_train_objective(c: &mut Criterion) {
    let labeled = cloud(256, 5);
    let unlabeled = cloud(256, 6);
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let targets: Vec<usize> = (0..256).map(|_| rng.gen_range(0..CLASSES)).collect();
    let graphs = build_graphs(unlabeled.coords(), &targets, 8, 8, 1.0).expect("graphs");
    let bb = BackboneConfig::default();
    let store = model_store(&bb);
    c.bench_function("objective_backward_256", |b| {
        b.iter(|| {
            let mut store = store.clone();
            forward_backward(&mut store, |tape, store| {
                objective(store, &bb, &labeled, &unlabeled, &targets, &graphs, tape)
            })
            .expect("backward")
        })
    });
}

criterion_group!(
    benches,
    bench_knn,
    bench_graph_build,
    bench_forward,
    bench_regularizer,
    bench_train_objective
);
criterion_main!(benches);
