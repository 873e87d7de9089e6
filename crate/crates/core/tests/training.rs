mod common;

use cteg::cattrain::{Ablation, Phase2Scope, Schedule, Trainer};
use cteg::corpus::{sample_episode, Dataset};
use cteg::model::{Model, PreparedEpisode};
use cteg::numcore::Graph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{separable, tiny_config};

fn episode(model: &Model, ds: &Dataset, n: usize, k: usize, q: usize, seed: u64) -> PreparedEpisode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.prepare_episode(&sample_episode(ds, n, k, q, &mut rng).unwrap()).unwrap()
}

fn values(model: &Model) -> Vec<Vec<f64>> {
    model.store.iter().map(|(_, p)| p.tensor.data().to_vec()).collect()
}

#[test]
fn all_correct_episode_skips_the_confusion_phase() {
    let ds = separable(3, 4);
    let mut cat = Trainer::new(tiny_config(3, 1, 2), &ds, &ds).unwrap();
    let mut off_cfg = tiny_config(3, 1, 2);
    off_cfg.ablations = vec![Ablation::CatOff];
    let mut off = Trainer::new(off_cfg, &ds, &ds).unwrap();
    assert_eq!(values(&cat.model), values(&off.model));
    let ep = episode(&cat.model, &ds, 3, 1, 2, 5);
    let m = cat.train_step(&ep).unwrap();
    assert_eq!(m.n_misclassified, 0);
    assert_eq!((m.l_bar, m.l_kl), (0.0, 0.0));
    off.train_step(&ep).unwrap();
    assert_eq!(values(&cat.model), values(&off.model));
}

#[test]
fn cat_off_always_reports_zero_confusion_losses() {
    let ds = cteg::corpus::generate_synthetic(&synth(), 3).unwrap();
    let mut cfg = tiny_config(3, 2, 2);
    cfg.ablations = vec![Ablation::CatOff];
    cfg.steps = 8;
    let mut t = Trainer::new(cfg, &ds, &ds).unwrap();
    let mut seen = 0;
    t.train(&ds, None, |m| {
        seen += m.n_misclassified;
        assert_eq!((m.l_bar, m.l_kl), (0.0, 0.0));
        Ok(())
    })
    .unwrap();
    assert!(seen > 0, "fixture should produce some misclassifications");
}

fn synth() -> cteg::corpus::SynthConfig {
    use cteg::corpus::{RelationTemplate, SynthConfig};
    SynthConfig::new(
        vec![
            RelationTemplate::new("a", "lives in"),
            RelationTemplate::new("b", "works for"),
            RelationTemplate::new("c", "was born in"),
        ],
        6,
    )
}

#[test]
fn confusion_phase_lowers_its_objective() {
    let ds = cteg::corpus::generate_synthetic(&synth(), 1).unwrap();
    for scope in [Phase2Scope::All, Phase2Scope::Projection] {
        let mut cfg = tiny_config(3, 2, 3);
        cfg.lr = 1e-4;
        cfg.phase2_scope = scope;
        let mut t = Trainer::new(cfg.clone(), &ds, &ds).unwrap();
        let ep = (0..50)
            .map(|s| episode(&t.model, &ds, 3, 2, 3, s))
            .find(|ep| {
                let deltas = t.model.episode_deltas(ep).unwrap();
                deltas.iter().zip(&ep.gold).any(|(d, &g)| cteg::protohead::predict(d) != g)
            })
            .expect("an episode with a misclassified query");
        let objective = |model: &Model, records: &[cteg::cattrain::MisclassifiedRecord]| {
            let mut g = Graph::new();
            let net = &model.network;
            let protos = net.prototypes(&mut g, &model.store, &ep.support).unwrap();
            let ds: Vec<_> = records
                .iter()
                .map(|r| net.delta(&mut g, &model.store, protos, &ep.queries[r.query]).unwrap())
                .collect();
            let (bar, kl) = cteg::cattrain::confusion_terms(&mut g, net, &model.store, &ds, records, false)
                .unwrap()
                .unwrap();
            g.value(bar).item() + g.value(kl).item()
        };
        // Phase 1 only, to get the parameters the confusion phase starts from.
        let mut off_cfg = cfg.clone();
        off_cfg.ablations = vec![Ablation::CatOff];
        let mut plain = Trainer::with_model(off_cfg, t.model.clone());
        plain.train_step(&ep).unwrap();
        let deltas = plain.model.episode_deltas(&ep).unwrap();
        let preds: Vec<usize> = deltas.iter().map(|d| cteg::protohead::predict(d)).collect();
        let records = cteg::cattrain::select_misclassified(&preds, &ep.gold);
        let before = objective(&plain.model, &records);
        t.train_step(&ep).unwrap();
        let after = objective(&t.model, &records);
        assert!(after < before, "{scope:?}: {after} !< {before}");
        if scope == Phase2Scope::Projection {
            let head = [t.model.network.head.wc, t.model.network.head.bc];
            for (id, p) in t.model.store.iter() {
                if !head.contains(&id) {
                    assert_eq!(p.tensor, plain.model.store.get(id).tensor, "{}", p.name);
                }
            }
        }
    }
}

#[test]
fn same_seed_same_metrics_under_both_schedules() {
    let ds = cteg::corpus::generate_synthetic(&synth(), 2).unwrap();
    for schedule in [Schedule::TwoPhase, Schedule::Joint] {
        let run = || {
            let mut cfg = tiny_config(3, 2, 2);
            cfg.schedule = schedule;
            let mut t = Trainer::new(cfg, &ds, &ds).unwrap();
            let mut log = Vec::new();
            t.train(&ds, None, |m| {
                log.push(serde_json::to_string(m).unwrap());
                Ok(())
            })
            .unwrap();
            (log, t.model.to_bytes().unwrap())
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0.len(), 5);
        assert_eq!(a, b);
    }
}

#[test]
fn zero_steps_leaves_initialization() {
    let ds = separable(3, 3);
    let mut cfg = tiny_config(3, 1, 1);
    cfg.steps = 0;
    let init = Trainer::new(cfg.clone(), &ds, &ds).unwrap().model.to_bytes().unwrap();
    let mut t = Trainer::new(cfg, &ds, &ds).unwrap();
    let mut lines = 0;
    t.train(&ds, None, |_| {
        lines += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(lines, 0);
    assert_eq!(t.model.to_bytes().unwrap(), init);
}

#[test]
fn training_fits_a_separable_corpus() {
    let ds = separable(4, 6);
    let mut cfg = tiny_config(4, 2, 2);
    cfg.lr = 1e-2;
    cfg.steps = 60;
    let mut t = Trainer::new(cfg, &ds, &ds).unwrap();
    t.train(&ds, None, |_| Ok(())).unwrap();
    let report = cteg::eval::evaluate(
        &t.model,
        &ds,
        cteg::eval::EpisodeSpec {
            n: 4,
            k: 2,
            q: 2,
            episodes: 20,
            seed: 1,
        },
    )
    .unwrap();
    assert_eq!(report.mean, 1.0);
}
