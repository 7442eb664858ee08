use osr_ebm::numkit::Rng;
use osr_ebm::synthdata::{build_openset_data, LabeledSample, SynthConfig};
use osr_ebm::trainer::{
    density_fingerprint, discriminative_step, generative_step, init_checkpoint, load_checkpoint,
    resume, save_checkpoint, train, Checkpoint, Rates, TrainConfig, TrainData, TrainError,
    LOG_HEADER,
};
use osr_ebm::Execution;

fn small_data() -> TrainData {
    let synth = SynthConfig {
        classes: 6,
        known: 3,
        attrs: 8,
        dim: 8,
        per_class: 24,
        groups: 2,
        ..Default::default()
    };
    let d = build_openset_data(&synth).unwrap();
    TrainData::from_samples(&d.train, d.known_count()).unwrap()
}

fn small_cfg() -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs: 5,
        t_gen: 2,
        t_uvos: 2,
        batch_size: 16,
        warmup_epochs: 1,
        restart_epochs: [2, 4],
        latent: 4,
        feat: 8,
        hidden: 8,
        uvos_candidates: 20,
        uvos_samples: 4,
        seed: 11,
        ..Default::default()
    };
    cfg.sgld.steps = 10;
    cfg
}

fn bytes(c: &Checkpoint) -> Vec<u8> {
    c.to_bytes().unwrap()
}

fn all_rows(data: &TrainData) -> Vec<usize> {
    (0..data.len()).collect()
}

fn store_hash(c: &Checkpoint, tag: &str) -> u64 {
    c.model.stores.by_tag(tag).unwrap().fingerprint()
}

/// Checkpoint after the density phase, ready for steps with the outlier term.
fn past_density_phase(cfg: &TrainConfig, data: &TrainData) -> Checkpoint {
    resume(
        init_checkpoint(cfg, data).unwrap(),
        data,
        Some(cfg.t_uvos),
        Execution::Sequential,
    )
    .unwrap()
    .checkpoint
}

#[test]
fn zero_epochs_returns_initialization() {
    let data = small_data();
    let cfg = TrainConfig {
        epochs: 0,
        t_gen: 0,
        t_uvos: 0,
        ..small_cfg()
    };
    let run = train(&cfg, &data, Execution::Sequential).unwrap();
    assert!(run.log.records.is_empty());
    assert_eq!(
        bytes(&run.checkpoint),
        bytes(&init_checkpoint(&cfg, &data).unwrap())
    );
}

#[test]
fn identical_configs_give_identical_checkpoints() {
    let data = small_data();
    let a = train(&small_cfg(), &data, Execution::Sequential).unwrap();
    let b = train(&small_cfg(), &data, Execution::Sequential).unwrap();
    assert_eq!(bytes(&a.checkpoint), bytes(&b.checkpoint));
    assert_eq!(a.log.records.len(), 5);
}

#[test]
fn parallel_and_sequential_runs_match() {
    let data = small_data();
    let a = train(&small_cfg(), &data, Execution::Sequential).unwrap();
    let b = train(&small_cfg(), &data, Execution::Parallel).unwrap();
    assert_eq!(bytes(&a.checkpoint), bytes(&b.checkpoint));
}

#[test]
fn resume_through_a_file_matches_uninterrupted_run() {
    let data = small_data();
    let cfg = small_cfg();
    let full = train(&cfg, &data, Execution::Sequential).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for stop in [1, 2, 3] {
        let part = resume(
            init_checkpoint(&cfg, &data).unwrap(),
            &data,
            Some(stop),
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(part.checkpoint.epoch, stop);
        let path = dir.path().join(format!("e{stop}.ckpt"));
        save_checkpoint(&part.checkpoint, &path).unwrap();
        let rest = resume(
            load_checkpoint(&path).unwrap(),
            &data,
            None,
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(rest.log.records.len(), cfg.epochs - stop);
        assert_eq!(
            bytes(&rest.checkpoint),
            bytes(&full.checkpoint),
            "resume at epoch {stop}"
        );
    }
}

#[test]
fn save_load_save_is_byte_identical() {
    let data = small_data();
    let run = train(&small_cfg(), &data, Execution::Sequential).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    save_checkpoint(&run.checkpoint, &p1).unwrap();
    let loaded = load_checkpoint(&p1).unwrap();
    save_checkpoint(&loaded, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(loaded.epoch, run.checkpoint.epoch);
    assert_eq!(loaded.config, run.checkpoint.config);
}

#[test]
fn damaged_files_fail_to_load() {
    let data = small_data();
    let ckpt = init_checkpoint(&small_cfg(), &data).unwrap();
    let good = bytes(&ckpt);
    for cut in [0, 4, 12, 40, good.len() / 2, good.len() - 1] {
        assert!(
            Checkpoint::from_bytes(&good[..cut]).is_err(),
            "truncated at {cut}"
        );
    }
    let mut longer = good.clone();
    longer.push(0);
    assert!(Checkpoint::from_bytes(&longer).is_err());
    let mut bad_magic = good.clone();
    bad_magic[0] ^= 0xff;
    assert!(Checkpoint::from_bytes(&bad_magic).is_err());
    let mut bad_version = good.clone();
    bad_version[8] = 99;
    assert!(Checkpoint::from_bytes(&bad_version).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    std::fs::write(&path, &good[..good.len() - 8]).unwrap();
    assert!(load_checkpoint(&path).is_err());
    assert!(load_checkpoint(&dir.path().join("missing.ckpt")).is_err());
}

#[test]
fn log_has_one_row_per_epoch_and_stages_terms() {
    let data = small_data();
    let cfg = small_cfg();
    let run = train(&cfg, &data, Execution::Sequential).unwrap();
    let csv = run.log.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), LOG_HEADER);
    assert_eq!(lines.count(), cfg.epochs);
    for r in &run.log.records {
        assert_eq!(r.uvos.is_some(), r.epoch >= cfg.t_uvos, "epoch {}", r.epoch);
        assert_eq!(r.ebm.is_some(), r.epoch >= cfg.t_gen, "epoch {}", r.epoch);
        assert!(r.attr.is_some());
    }
}

#[test]
fn densities_are_frozen_after_the_tracking_phase() {
    let data = small_data();
    let cfg = small_cfg();
    let mut fingerprints = Vec::new();
    let init = init_checkpoint(&cfg, &data).unwrap();
    fingerprints.push(density_fingerprint(&init.densities));
    for stop in 1..=cfg.epochs {
        let c = resume(init.clone(), &data, Some(stop), Execution::Sequential)
            .unwrap()
            .checkpoint;
        fingerprints.push(density_fingerprint(&c.densities));
    }
    // changes while tracking, constant afterwards
    assert_ne!(fingerprints[0], fingerprints[1]);
    assert_ne!(fingerprints[1], fingerprints[2]);
    for f in &fingerprints[cfg.t_uvos + 1..] {
        assert_eq!(*f, fingerprints[cfg.t_uvos]);
    }
}

#[test]
fn outlier_term_absent_before_its_start_epoch() {
    let data = small_data();
    let cfg = small_cfg();
    let mut ckpt = past_density_phase(&cfg, &data);
    let batch = data.batch(&all_rows(&data));
    let rates = Rates::at(0, &cfg).unwrap();
    let early = discriminative_step(
        &mut ckpt.clone(),
        &batch,
        cfg.t_uvos - 1,
        &rates,
        Execution::Sequential,
    )
    .unwrap();
    assert!(early.uvos.is_none());
    let late =
        discriminative_step(&mut ckpt, &batch, cfg.t_uvos, &rates, Execution::Sequential).unwrap();
    let u = late.uvos.unwrap();
    assert!(u.is_finite() && u > 0.0);
}

#[test]
fn zero_weights_reduce_discriminative_loss_to_cross_entropy() {
    let data = small_data();
    let cfg = TrainConfig {
        lambda0: 0.0,
        lambda1: 0.0,
        ..small_cfg()
    };
    let mut ckpt = past_density_phase(&cfg, &data);
    let batch = data.batch(&all_rows(&data));
    let rates = Rates::at(cfg.t_uvos, &cfg).unwrap();
    let l =
        discriminative_step(&mut ckpt, &batch, cfg.t_uvos, &rates, Execution::Sequential).unwrap();
    assert!(l.attr.is_some() && l.uvos.is_some());
    assert_eq!(l.total, l.cls);

    let cfg = small_cfg();
    let mut ckpt = past_density_phase(&cfg, &data);
    let l =
        discriminative_step(&mut ckpt, &batch, cfg.t_uvos, &rates, Execution::Sequential).unwrap();
    let expected = l.cls + cfg.lambda0 * l.attr.unwrap() + cfg.lambda1 * l.uvos.unwrap();
    assert!((l.total - expected).abs() < 1e-12);
}

#[test]
fn zero_rate_freezes_its_optimizer_group() {
    let data = small_data();
    let cfg = small_cfg();
    let base = past_density_phase(&cfg, &data);
    let batch = data.batch(&all_rows(&data));
    let epoch = cfg.t_uvos;
    let tags = ["phi1", "omega", "phi2", "alpha", "theta", "beta"];
    // discriminative groups: eta index -> stores it drives
    let groups: [(usize, &[&str]); 3] = [
        (0, &["phi1", "phi2"]),
        (1, &["alpha", "theta"]),
        (2, &["omega"]),
    ];
    for (i, frozen) in groups {
        let mut eta = [1e-2; 4];
        eta[i] = 0.0;
        let mut c = base.clone();
        for _ in 0..3 {
            discriminative_step(&mut c, &batch, epoch, &Rates { eta }, Execution::Sequential)
                .unwrap();
        }
        for tag in tags {
            let same = store_hash(&c, tag) == store_hash(&base, tag);
            if frozen.contains(&tag) || tag == "beta" {
                assert!(same, "eta{i} = 0 should freeze {tag}");
            } else {
                assert!(!same, "eta{i} = 0 should not freeze {tag}");
            }
        }
    }
    // generative step: eta3 drives the decoder only
    let mut c = base.clone();
    generative_step(
        &mut c,
        &batch,
        epoch,
        &Rates {
            eta: [1e-2, 1e-2, 1e-2, 0.0],
        },
        Execution::Sequential,
    )
    .unwrap();
    assert_eq!(store_hash(&c, "beta"), store_hash(&base, "beta"));
    assert_eq!(store_hash(&c, "theta"), store_hash(&base, "theta"));
    assert_ne!(store_hash(&c, "alpha"), store_hash(&base, "alpha"));
}

fn separable_two_class() -> TrainData {
    let mut rng = Rng::new(5);
    let mut samples = Vec::new();
    for i in 0..40 {
        let y = i % 2;
        let sign = if y == 0 { 1.0 } else { -1.0 };
        let x = (0..6).map(|_| sign + 0.2 * rng.normal()).collect();
        let a = if y == 0 {
            vec![1, 1, 0, 0]
        } else {
            vec![0, 0, 1, 1]
        };
        samples.push(LabeledSample { x, y, a });
    }
    TrainData::from_samples(&samples, 2).unwrap()
}

#[test]
fn one_step_decreases_discriminative_loss_on_separable_data() {
    let data = separable_two_class();
    let cfg = TrainConfig {
        use_uvos: false,
        ..small_cfg()
    };
    let mut ckpt = init_checkpoint(&cfg, &data).unwrap();
    let batch = data.batch(&all_rows(&data));
    let probe = |c: &Checkpoint| {
        discriminative_step(
            &mut c.clone(),
            &batch,
            0,
            &Rates { eta: [0.0; 4] },
            Execution::Sequential,
        )
        .unwrap()
        .total
    };
    let before = probe(&ckpt);
    let stepped = discriminative_step(
        &mut ckpt,
        &batch,
        0,
        &Rates { eta: [1e-2; 4] },
        Execution::Sequential,
    )
    .unwrap();
    assert_eq!(stepped.total, before);
    let after = probe(&ckpt);
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn generative_losses_decompose() {
    let data = small_data();
    let batch = data.batch(&all_rows(&data));
    for lambda2 in [0.0, 1.0, 2.5] {
        let cfg = TrainConfig {
            lambda2,
            ..small_cfg()
        };
        let mut ckpt = init_checkpoint(&cfg, &data).unwrap();
        let rates = Rates::at(cfg.t_gen, &cfg).unwrap();
        let l =
            generative_step(&mut ckpt, &batch, cfg.t_gen, &rates, Execution::Sequential).unwrap();
        let gen = l.recon + l.kl + l.energy - lambda2 * l.ci;
        assert!((l.gen_total - gen).abs() < 1e-12);
        assert!((l.prior_total - (l.ebm - lambda2 * l.ci)).abs() < 1e-12);
        if lambda2 == 0.0 {
            assert_eq!(l.prior_total, l.ebm);
        }
        assert!(l.recon > 0.0 && l.kl >= 0.0 && l.ci.is_finite());
    }
}

#[test]
fn generative_step_before_its_start_is_rejected() {
    let data = small_data();
    let cfg = small_cfg();
    let mut ckpt = init_checkpoint(&cfg, &data).unwrap();
    let batch = data.batch(&all_rows(&data));
    let before = bytes(&ckpt);
    let rates = Rates::at(0, &cfg).unwrap();
    assert!(generative_step(
        &mut ckpt,
        &batch,
        cfg.t_gen - 1,
        &rates,
        Execution::Sequential
    )
    .is_err());
    assert_eq!(bytes(&ckpt), before);
}

#[test]
fn divergence_returns_the_last_good_state() {
    let data = small_data();
    let mut cfg = small_cfg();
    cfg.sgld.step_size = 1e100;
    match train(&cfg, &data, Execution::Sequential) {
        Err(TrainError::Diverged { message, partial }) => {
            assert!(message.contains("epoch 2"), "{message}");
            assert_eq!(partial.epoch, cfg.t_gen);
            let clean = resume(
                init_checkpoint(&cfg, &data).unwrap(),
                &data,
                Some(cfg.t_gen),
                Execution::Sequential,
            )
            .unwrap();
            assert_eq!(bytes(&partial), bytes(&clean.checkpoint));
        }
        other => panic!(
            "expected divergence, got {:?}",
            other.map(|r| r.checkpoint.epoch)
        ),
    }
}

#[test]
fn mismatched_data_is_rejected_on_resume() {
    let data = small_data();
    let ckpt = init_checkpoint(&small_cfg(), &data).unwrap();
    assert!(resume(ckpt, &separable_two_class(), None, Execution::Sequential).is_err());
}
