use std::fs;
use std::path::Path;

use ltr3o::experiment::*;
use ltr3o::flow::{cache_entry_path, FlowEstimator, PyramidLk};
use ltr3o::ingest::{generate_synthetic, load_manifest, write_synthetic, SynthDataset, SynthSpec};
use ltr3o::par::Exec;
use ltr3o::train::{gap_stats, train, TrainOptions, TrainSample};
use ltr3o::{BackboneSpec, Config, Error};

fn small_spec(subjects: usize, clips: usize) -> SynthSpec {
    SynthSpec {
        n_subjects: subjects,
        clips_per_subject: clips,
        frames_per_clip: 12,
        image_size: 16,
        ..SynthSpec::default()
    }
}

fn quick_config() -> Config {
    Config {
        k: 4,
        image_size: 16,
        batch_size: 8,
        initial_lr: 5e-3,
        epochs: 2,
        backbone: BackboneSpec::tiny(),
        ..Config::default()
    }
}

fn desk_config() -> Config {
    Config::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/acceptance.cfg")).unwrap()
}

#[test]
fn cache_of_72_samples_holds_576_records() {
    let ds = generate_synthetic(&SynthSpec::default(), 0).unwrap();
    let cfg = Config { image_size: 32, ..Config::default() };
    let opts = PrepareOptions::from_config(&cfg);
    let prepared = prepare(&ds.samples, &opts).unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(write_cache(dir.path(), &prepared, &opts).unwrap(), 576);

    let root = tempfile::tempdir().unwrap();
    let manifest = load_manifest(&write_synthetic(&ds, root.path()).unwrap(), None).unwrap();
    let back = read_cache(dir.path(), &manifest).unwrap();
    assert_eq!(back, prepared);
    let info = read_cache_info(dir.path()).unwrap();
    assert_eq!((info.structure, info.candidates, info.occ_seed), (Structure::ThreeO, 8, 0));

    fs::remove_file(cache_entry_path(dir.path(), "s03_c04", 6)).unwrap();
    fs::remove_file(cache_entry_path(dir.path(), "s07_c08", 1)).unwrap();
    let err = read_cache(dir.path(), &manifest).unwrap_err().to_string();
    assert!(err.contains("(s03_c04, 6)") && err.contains("(s07_c08, 1)"), "{err}");
}

#[test]
fn preparation_is_deterministic_and_order_free() {
    let ds = generate_synthetic(&small_spec(2, 3), 4).unwrap();
    let opts = PrepareOptions { exec: Exec::Parallel, ..PrepareOptions::from_config(&quick_config()) };
    let a = prepare(&ds.samples, &opts).unwrap();
    let mut reversed = ds.samples.clone();
    reversed.reverse();
    let mut b = prepare(&reversed, &PrepareOptions { exec: Exec::Sequential, ..opts.clone() }).unwrap();
    b.reverse();
    assert_eq!(a, b);
    let c = prepare(&ds.samples, &PrepareOptions { occ_seed: 1, ..opts }).unwrap();
    assert_ne!(a.iter().map(|p| &p.occurring).collect::<Vec<_>>(), c.iter().map(|p| &p.occurring).collect::<Vec<_>>());
}

#[test]
fn imported_reference_fields_reproduce_reference_inputs() {
    let ds = generate_synthetic(&small_spec(1, 3), 2).unwrap();
    let opts = PrepareOptions::from_config(&quick_config());
    let reference = prepare(&ds.samples, &opts).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let est = PyramidLk::default();
    for (s, p) in ds.samples.iter().zip(&reference) {
        for (j0, &t) in p.occurring.iter().enumerate() {
            let a = est.estimate(&s.frames[s.onset_idx], &s.frames[t]).unwrap();
            let b = est.estimate(&s.frames[t], &s.frames[s.offset_idx]).unwrap();
            ltr3o::flow::write_import(dir.path(), &s.sample_id, j0 + 1, &a, &b, t).unwrap();
        }
    }
    let imported =
        prepare(&ds.samples, &PrepareOptions { source: FlowSource::Import(dir.path().into()), ..opts.clone() })
            .unwrap();
    assert_eq!(imported, reference);

    let two =
        PrepareOptions { structure: Structure::TwoO, source: FlowSource::Import(dir.path().into()), ..opts.clone() };
    let two_ref = PrepareOptions { structure: Structure::TwoO, ..opts.clone() };
    assert_eq!(prepare(&ds.samples, &two).unwrap(), prepare(&ds.samples, &two_ref).unwrap());

    fs::remove_dir_all(dir.path().join(&ds.samples[1].sample_id)).ok();
    let missing = PrepareOptions { source: FlowSource::Import(dir.path().join("nothing")), ..opts };
    let err = prepare(&ds.samples, &missing).unwrap_err();
    assert!(err.is_validation());
    assert!(err.to_string().contains(&format!("({}, 4)", ds.samples[2].sample_id)));
}

#[test]
fn structure_inputs() {
    let ds = generate_synthetic(&small_spec(1, 2), 3).unwrap();
    let base = PrepareOptions::from_config(&quick_config());
    let one =
        prepare(&ds.samples, &PrepareOptions { structure: Structure::OneO, candidates: 1, ..base.clone() }).unwrap();
    let s = &ds.samples[0];
    assert_eq!(one[0].inputs.len(), 1);
    let frame = &s.frames[one[0].occurring[0]];
    for c in 0..3 {
        assert_eq!(one[0].inputs[0].get(3, 5, c), frame.get(3, 5, 0));
    }
    let apex = prepare(&ds.samples, &PrepareOptions { structure: Structure::OnsetApexOffset, ..base.clone() }).unwrap();
    assert_eq!(apex[0].occurring, vec![s.apex_idx.unwrap()]);
    let mut no_apex: Vec<_> = ds.samples.clone();
    no_apex[1].apex_idx = None;
    let err = prepare(&no_apex, &PrepareOptions { structure: Structure::Apex, ..base }).unwrap_err();
    assert!(err.to_string().contains("apex"));
}

#[test]
fn loso_folds_are_independent_of_fold_scheduling() {
    let ds = generate_synthetic(&small_spec(4, 3), 5).unwrap();
    let cfg = quick_config();
    let data = prepare(&ds.samples, &PrepareOptions::from_config(&cfg)).unwrap();
    let seq = LosoOptions { fold_exec: Exec::Sequential, ..LosoOptions::default() };
    let par = LosoOptions { fold_exec: Exec::Parallel, ..LosoOptions::default() };
    let a = run_loso(&data, &ds.labels, &cfg, &seq).unwrap();
    let b = run_loso(&data, &ds.labels, &cfg, &par).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.report, b.report);
    assert_eq!(a.records.len(), 4);
    for r in &a.records {
        assert!(r.sample_ids.iter().all(|id| id.starts_with(&r.test_subject)));
    }
}

#[test]
fn loso_rejects_bad_config() {
    let ds = generate_synthetic(&small_spec(2, 3), 5).unwrap();
    let data = prepare(&ds.samples, &PrepareOptions::from_config(&quick_config())).unwrap();
    let bad = Config { gamma: 0.0, ..quick_config() };
    assert!(matches!(run_loso(&data, &ds.labels, &bad, &LosoOptions::default()), Err(Error::Config(_))));
}

fn train_set(ds: &SynthDataset, cfg: &Config) -> Vec<TrainSample> {
    prepare(&ds.samples, &PrepareOptions::from_config(cfg)).unwrap().iter().map(Prepared::to_train).collect()
}

#[test]
fn single_batch_overfit() {
    let cfg = Config { epochs: 200, batch_size: 8, ..desk_config() };
    let ds = generate_synthetic(&SynthSpec::default(), 0).unwrap();
    let data: Vec<TrainSample> = train_set(&ds, &cfg).into_iter().take(8).collect();
    let opts = TrainOptions { no_augment: true, ..TrainOptions::default() };
    let out = train(&cfg, &ds.labels, &data, &opts).unwrap();
    let stats = gap_stats(&out.model, &data, &cfg, Exec::default()).unwrap();
    assert!(stats.accuracy >= 99.0, "train accuracy {}", stats.accuracy);
}

#[test]
fn fixed_seed_gives_identical_loss_curves() {
    let ds = generate_synthetic(&small_spec(2, 3), 1).unwrap();
    let cfg = Config { epochs: 4, ..quick_config() };
    let data = train_set(&ds, &cfg);
    let a = train(&cfg, &ds.labels, &data, &TrainOptions::default()).unwrap();
    let b = train(&cfg, &ds.labels, &data, &TrainOptions::default()).unwrap();
    assert_eq!(a.epochs, b.epochs);
    let c = train(&Config { seed: 1, ..cfg }, &ds.labels, &data, &TrainOptions::default()).unwrap();
    assert_ne!(a.epochs, c.epochs);
}

/// Three-frame candidates beat a single static frame at desk scale.
#[test]
fn three_o_candidates_beat_single_frame() {
    let cfg = desk_config();
    let ds = generate_synthetic(&SynthSpec::default(), 0).unwrap();
    let base = PrepareOptions::from_config(&cfg);
    let run = |structure: Structure, candidates: usize| {
        let data = prepare(&ds.samples, &PrepareOptions { structure, candidates, ..base.clone() }).unwrap();
        run_loso(&data, &ds.labels, &cfg, &LosoOptions::default()).unwrap().report.accuracy
    };
    let three = run(Structure::ThreeO, cfg.k);
    let one = run(Structure::OneO, 1);
    assert!(three >= one, "3o {three} vs 1o {one}");
}
