use std::collections::BTreeMap;

use psgalign::autodiff::{Checkpoint, CheckpointError, Graph};
use psgalign::corpus::{Corpus, Split};
use psgalign::dash::Objective;
use psgalign::model::{sample_mask, AlignmentModel, ModelConfig};
use psgalign::pretrain::*;
use psgalign::synth::{generate, SynthSpec};
use psgalign::Modality;

fn corpus(subjects: usize, seed: u64) -> Corpus {
    let spec = SynthSpec {
        n_subjects: subjects,
        nights_per_subject: 1,
        epochs_per_night: 10,
        seed,
        ..SynthSpec::default()
    };
    generate(&spec, false).unwrap().corpus
}

fn keep_only(c: &mut Corpus, mods: &[Modality]) {
    for n in &mut c.nights {
        n.epochs.retain(|m, _| mods.contains(m));
    }
}

fn tiny(batch: usize) -> PretrainConfig {
    let mut cfg = PretrainConfig::desk();
    cfg.model = ModelConfig {
        size_preset: None,
        hidden_dim: 16,
        layers: 1,
        heads: 2,
        align_dim: 8,
        ..ModelConfig::default()
    };
    cfg.data.batch_size = batch;
    cfg.data.seq_tokens = 6;
    cfg.optimizer.total_steps = 50;
    cfg
}

#[test]
fn single_feasible_pair_is_always_drawn() {
    let mut c = corpus(10, 1);
    keep_only(&mut c, &[Modality::Eeg, Modality::Eog]);
    let cfg = tiny(4);
    for step in 0..50 {
        let plan = sample_batch(&c, &cfg, &mut batch_rng(cfg.seed, step)).unwrap();
        assert_eq!(plan.pair, (Modality::Eeg, Modality::Eog));
        assert_eq!(plan.segments.len(), 4);
    }
}

#[test]
fn plans_are_seed_deterministic() {
    let c = corpus(10, 1);
    let cfg = tiny(4);
    let a = sample_batch(&c, &cfg, &mut batch_rng(3, 9)).unwrap();
    let b = sample_batch(&c, &cfg, &mut batch_rng(3, 9)).unwrap();
    assert_eq!(a, b);
    let other = sample_batch(&c, &cfg, &mut batch_rng(4, 9)).unwrap();
    assert_ne!(a, other);
}

#[test]
fn pair_frequencies_follow_joint_availability() {
    let mut c = corpus(24, 2);
    // Rotate through modality subsets so pairs differ in availability.
    let subsets: [&[Modality]; 4] = [
        &[Modality::Eeg, Modality::Ecg, Modality::Resp],
        &[Modality::Eeg, Modality::Ecg],
        &[Modality::Eeg, Modality::Resp],
        &[Modality::Eeg],
    ];
    for (i, n) in c.nights.iter_mut().enumerate() {
        let keep = subsets[i % 4];
        n.epochs.retain(|m, _| keep.contains(m));
    }
    let cfg = tiny(2);
    // Target by enumeration over pretrain nights.
    let mut want: BTreeMap<String, f64> = BTreeMap::new();
    let mods = [Modality::Eeg, Modality::Ecg, Modality::Resp];
    for i in c.indices(Split::Pretrain) {
        let n = &c.nights[i];
        for a in 0..3 {
            for b in a + 1..3 {
                if n.has(mods[a]) && n.has(mods[b]) {
                    *want.entry(format!("{}-{}", mods[a], mods[b])).or_default() += 1.0;
                }
            }
        }
    }
    let total: f64 = want.values().sum();
    let draws = 10_000u64;
    let got = pair_frequencies(&c, &cfg, draws).unwrap();
    assert_eq!(got.keys().collect::<Vec<_>>(), want.keys().collect::<Vec<_>>());
    for (k, w) in &want {
        let p = w / total;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        let n = got[k] as f64;
        assert!((n - draws as f64 * p).abs() <= 3.0 * sd, "{k}: {n} vs {}", draws as f64 * p);
    }
}

#[test]
fn nothing_to_pair_is_an_error() {
    let mut c = corpus(6, 3);
    keep_only(&mut c, &[Modality::Eeg]);
    let cfg = tiny(2);
    assert!(matches!(
        sample_batch(&c, &cfg, &mut batch_rng(1, 0)),
        Err(PretrainError::NoPairableData(_))
    ));
}

#[test]
fn batches_stay_inside_the_pretrain_split() {
    let c = corpus(20, 4);
    let cfg = tiny(8);
    for step in 0..200 {
        let plan = sample_batch(&c, &cfg, &mut batch_rng(cfg.seed, step)).unwrap();
        for s in &plan.segments {
            assert_eq!(c.splits[s.night], Split::Pretrain);
            assert_eq!(c.nights[s.night].meta.night_id, s.night_id);
            assert!(s.offset + cfg.data.seq_tokens <= c.nights[s.night].n_epochs());
        }
    }
    let mut plan = sample_batch(&c, &cfg, &mut batch_rng(cfg.seed, 0)).unwrap();
    let test_night = c.indices(Split::Test)[0];
    plan.segments[0].night = test_night;
    plan.segments[0].night_id = c.nights[test_night].meta.night_id.clone();
    let model = AlignmentModel::new(cfg.model.clone(), &c.modalities(), 1).unwrap();
    let g = Graph::new();
    assert!(matches!(
        forward_loss(&g, &model, &c, &plan, &cfg, 0, true),
        Err(PretrainError::SplitLeak(_))
    ));
}

#[test]
fn nights_are_not_repeated_while_enough_remain() {
    let c = corpus(30, 5);
    let cfg = tiny(8);
    let plan = sample_batch(&c, &cfg, &mut batch_rng(1, 1)).unwrap();
    let mut ids: Vec<_> = plan.segments.iter().map(|s| s.night).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 8);
}

#[test]
fn several_segments_per_night_share_the_night_id() {
    let c = corpus(20, 5);
    let mut cfg = tiny(8);
    cfg.data.segments_per_night = 2;
    let plan = sample_batch(&c, &cfg, &mut batch_rng(1, 1)).unwrap();
    for pair in plan.segments.chunks(2) {
        assert_eq!(pair[0].night_id, pair[1].night_id);
    }
}

#[test]
fn view_masks_are_independent() {
    let n = 100_000;
    let a = sample_mask(n, 0.15, mask_seed(7, 3, 0));
    let b = sample_mask(n, 0.15, mask_seed(7, 3, 1));
    let mean = |v: &[bool]| v.iter().filter(|&&x| x).count() as f64 / n as f64;
    let (ma, mb) = (mean(&a), mean(&b));
    let cov = a.iter().zip(&b).map(|(&x, &y)| (x as u8 as f64 - ma) * (y as u8 as f64 - mb)).sum::<f64>() / n as f64;
    let corr = cov / (ma * (1.0 - ma) * mb * (1.0 - mb)).sqrt();
    assert!(corr.abs() <= 3.0 / (n as f64).sqrt(), "corr {corr}");
}

#[test]
fn initial_loss_is_near_uniform_softmax() {
    let c = corpus(60, 6);
    let b = 32;
    let ln_b = (b as f64).ln();
    for objective in [Objective::Dash, Objective::InfoNce] {
        for seed in 0..3 {
            let mut cfg = tiny(b);
            cfg.seed = seed;
            cfg.objective = objective;
            let mut t = Trainer::new(cfg, &c).unwrap();
            let rec = t.step_once(&c).unwrap();
            assert!(rec.loss >= 0.5 * ln_b && rec.loss <= 1.5 * ln_b, "{objective:?} seed {seed}: {}", rec.loss);
            assert_eq!(rec.lr, 0.0);
        }
    }
}

fn trace(c: &Corpus, cfg: &PretrainConfig, steps: u64) -> (Vec<u64>, Trainer) {
    let mut t = Trainer::new(cfg.clone(), c).unwrap();
    let recs = t.run(c, Some(steps), None).unwrap();
    (recs.iter().map(|r| r.loss.to_bits()).collect(), t)
}

#[test]
fn equal_seeds_give_bit_identical_traces() {
    let c = corpus(12, 7);
    let cfg = tiny(4);
    let (a, ta) = trace(&c, &cfg, 6);
    let (b, tb) = trace(&c, &cfg, 6);
    assert_eq!(a, b);
    assert_eq!(ta.model.params.fingerprint(|_| true), tb.model.params.fingerprint(|_| true));
    let mut other = cfg.clone();
    other.seed += 1;
    assert_ne!(trace(&c, &other, 6).0, a);
}

#[test]
fn checkpoint_resume_is_exact() {
    let c = corpus(12, 8);
    let cfg = tiny(4);
    let (_, mut straight) = trace(&c, &cfg, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    straight.save(&path).unwrap();
    let mut resumed = Trainer::load(cfg.clone(), &path, &c).unwrap();
    assert_eq!(resumed.step, 3);
    for _ in 0..2 {
        let a = straight.step_once(&c).unwrap();
        let b = resumed.step_once(&c).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.pair, b.pair);
    }
    assert_eq!(
        straight.model.params.fingerprint(|_| true),
        resumed.model.params.fingerprint(|_| true)
    );
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let c = corpus(8, 9);
    let cfg = tiny(2);
    let t = Trainer::new(cfg.clone(), &c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    let bytes = t.checkpoint().to_bytes();
    std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    assert!(matches!(
        Trainer::load(cfg.clone(), &path, &c),
        Err(PretrainError::Checkpoint(CheckpointError::Corrupt(_)))
    ));
    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"NOPE");
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(
        Trainer::load(cfg, &path, &c),
        Err(PretrainError::Checkpoint(CheckpointError::VersionMismatch { .. }))
    ));
}

#[test]
fn curriculum_adds_only_new_tokenizers() {
    let c = corpus(10, 10);
    let mut stage1 = tiny(4);
    stage1.data.modalities = vec![Modality::Eeg, Modality::Eog];
    let (_, t1) = trace(&c, &stage1, 2);
    let ck: Checkpoint = t1.checkpoint();
    let mut stage2 = stage1.clone();
    stage2.data.modalities.push(Modality::Ecg);
    let t2 = Trainer::resume(stage2.clone(), &ck, &c).unwrap();
    assert_eq!(t2.model.modalities(), vec![Modality::Eeg, Modality::Eog, Modality::Ecg]);
    let fresh = AlignmentModel::new(stage2.model.clone(), &[Modality::Ecg], stage2.seed).unwrap();
    for (id, name, value) in t2.model.params.iter() {
        let _ = id;
        if name.starts_with("tok.ecg") || name == "mask.ecg" {
            assert_eq!(value, fresh.params.value(fresh.params.id(name).unwrap()), "{name}");
        } else {
            let old = &ck.params.iter().find(|(n, _)| n == name).unwrap().1;
            assert_eq!(value, old, "{name}");
        }
    }
}

#[test]
fn non_finite_loss_aborts_with_context() {
    let c = corpus(8, 11);
    let cfg = tiny(2);
    let mut t = Trainer::new(cfg, &c).unwrap();
    let id = t.model.params.id("proj.2.b").unwrap();
    let mut v = t.model.params.value(id).clone();
    v.data_mut()[0] = f64::NAN;
    t.model.params.set_value(id, v);
    match t.step_once(&c) {
        Err(PretrainError::NonFiniteLoss { step, nights, .. }) => {
            assert_eq!(step, 0);
            assert_eq!(nights.len(), 2);
        }
        other => panic!("expected NonFiniteLoss, got {other:?}"),
    }
}

#[test]
fn metrics_log_is_csv() {
    let c = corpus(8, 12);
    let cfg = tiny(2);
    let mut t = Trainer::new(cfg, &c).unwrap();
    let mut buf: Vec<u8> = Vec::new();
    t.run(&c, Some(3), Some(&mut buf)).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    for (i, l) in lines.iter().enumerate() {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f.len(), 4);
        assert_eq!(f[0], i.to_string());
        assert!(f[1].contains('-'));
        f[2].parse::<f64>().unwrap();
        f[3].parse::<f64>().unwrap();
    }
    assert_eq!(METRICS_HEADER, "step,pair,loss,lr");
}

#[test]
fn config_file_sections_round_trip() {
    let cfg = PretrainConfig::desk();
    let text = cfg.to_toml();
    for section in ["[model]", "[dash]", "[optimizer]", "[data]"] {
        assert!(text.contains(section), "{section} missing");
    }
    assert_eq!(PretrainConfig::from_toml(&text).unwrap(), cfg);
    let partial = "seed = 3\n[data]\nbatch_size = 8\n[dash]\nmargin = 0.2\n";
    let p = PretrainConfig::from_toml(partial).unwrap();
    assert_eq!((p.seed, p.data.batch_size, p.dash.margin), (3, 8, 0.2));
    assert_eq!(p.data.seq_tokens, 20);
    let narrow = PretrainConfig::from_toml("[model]\nhidden_dim = 32\n").unwrap();
    assert_eq!(narrow.model.clone().resolved().hidden_dim, 32);
    let small = PretrainConfig::from_toml("[model]\nsize_preset = \"small\"\n").unwrap();
    assert_eq!(small.model.resolved().hidden_dim, 512);
    let too_long = "[data]\nseq_tokens = 121\n";
    assert!(matches!(PretrainConfig::from_toml(too_long), Err(PretrainError::InvalidConfig(_))));
    let paper = PretrainConfig::paper();
    assert_eq!(paper.data.seq_tokens + 1, 121);
    assert_eq!(paper.data.batch_size, 320);
    paper.validate().unwrap();
}
