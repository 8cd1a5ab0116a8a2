mod common;

use cbq::eval::{perplexity_of_chunks, LanguageModel};
use cbq::io::QuantizedCheckpoint;
use cbq::qmodel::{QuantSettings, QuantizedModel};
use cbq::recon::{
    distance_value, fp_window_output, run_pipeline, window_loss, window_loss_with_targets, DistanceKind, Pass,
    ReconSettings, Window,
};
use cbq::Tape;
use common::{random_batch, tiny_model};

fn settings(window_size: usize, overlap: usize) -> ReconSettings {
    ReconSettings {
        window_size,
        overlap,
        epochs: 1,
        batch_size: 2,
        ..ReconSettings::default()
    }
}

fn prepared(blocks: usize, bits: (u32, u32), seed: u64) -> (QuantizedModel, Vec<Vec<usize>>) {
    let fp = tiny_model(blocks, seed);
    let calib = random_batch(&fp.config, 4, seed + 100);
    let qm = QuantizedModel::prepare(&fp, &calib, &QuantSettings::cbq(bits.0, bits.1)).unwrap();
    (qm, calib)
}

#[test]
fn zero_learning_rates_leave_parameters_bit_exact() {
    let (mut qm, calib) = prepared(3, (4, 4), 1);
    let before = qm.clone();
    let s = ReconSettings {
        lr_step: 0.0,
        lr_factors: 0.0,
        ..settings(2, 1)
    };
    let report = run_pipeline(&mut qm, &calib, &s).unwrap();
    assert_eq!(report.windows.len(), 2);
    assert_eq!(qm, before);
}

#[test]
fn overlapping_blocks_are_updated_by_both_windows() {
    let (mut qm, calib) = prepared(4, (4, 8), 2);
    let report = run_pipeline(&mut qm, &calib, &settings(2, 1)).unwrap();
    for block in 2..=3 {
        let events: Vec<_> = report.updates.iter().filter(|e| e.block == block).collect();
        assert_eq!(events.len(), 2, "block {block}");
        assert_ne!(events[0].window, events[1].window);
    }
    let starts: Vec<usize> = report.windows.iter().map(|w| w.window.l).collect();
    assert!(starts.windows(2).all(|p| p[0] < p[1]));
}

#[test]
fn pipeline_is_deterministic() {
    let run = || {
        let (mut qm, calib) = prepared(3, (4, 4), 3);
        let report = run_pipeline(&mut qm, &calib, &settings(2, 1)).unwrap();
        (report, qm.export().unwrap().to_bytes())
    };
    let (r1, b1) = run();
    let (r2, b2) = run();
    assert_eq!(r1.metrics_log(), r2.metrics_log());
    assert_eq!(r1, r2);
    assert_eq!(b1, b2);
}

#[test]
fn every_iteration_is_logged() {
    let (mut qm, calib) = prepared(3, (4, 8), 4);
    let report = run_pipeline(&mut qm, &calib, &settings(2, 1)).unwrap();
    let log = report.metrics_log();
    // 4 samples, batch 2, 1 epoch
    for w in &report.windows {
        assert_eq!(w.trajectory.len(), 2);
        assert!(log.contains(&format!("window={} iter=1 loss=", w.window)));
        assert!(log.contains(&format!("window={} initial_loss=", w.window)));
    }
    assert_eq!(report.trajectory_csv().lines().count(), 1 + 2 * report.windows.len());
}

#[test]
fn first_window_terms_coincide() {
    let (qm, calib) = prepared(3, (4, 4), 5);
    let (fp_in, q_in) = qm.capture_block_io(&calib, 0).unwrap();
    assert_eq!(fp_in, q_in);
    let w = Window { l: 1, k: 2 };
    let seq = calib[0].len();
    let target = fp_window_output(&qm.fp, w, &fp_in, seq).unwrap();
    let tape = Tape::new();
    let both =
        window_loss_with_targets(&tape, &qm, w, &q_in, seq, &target, Some(&target), DistanceKind::L2Kl, None, Pass::Train)
            .unwrap();
    let normal =
        window_loss_with_targets(&tape, &qm, w, &q_in, seq, &target, None, DistanceKind::L2Kl, None, Pass::Train).unwrap();
    assert_eq!(both.recon.item(), normal.recon.item());
}

#[test]
fn quantized_stream_diverges_after_the_first_block() {
    let (qm, calib) = prepared(3, (4, 4), 6);
    for l in 1..3 {
        let (f, q) = qm.capture_block_io(&calib, l).unwrap();
        assert_eq!(f.shape(), &[calib.len() * calib[0].len(), 16]);
        assert_ne!(f, q, "block {l}");
    }
    assert!(qm.capture_block_io(&calib, 3).is_err());
}

#[test]
fn high_precision_matches_floating_point() {
    let fp = tiny_model(2, 7);
    let calib = random_batch(&fp.config, 4, 8);
    let s = QuantSettings {
        cfp: false,
        ..QuantSettings::rtn(16, 16)
    };
    let qm = QuantizedModel::prepare(&fp, &calib, &s).unwrap();
    let ckpt = qm.export().unwrap();
    let a = fp.logits(&calib).unwrap();
    let b = ckpt.logits(&calib).unwrap();
    let rel = a.sub(&b).unwrap().max_abs() / a.max_abs();
    assert!(rel < 1e-3, "{rel}");

    // homologous term vanishes when quantized blocks match the reference
    let (_, q) = qm.capture_block_io(&calib, 1).unwrap();
    let w = Window { l: 2, k: 2 };
    let seq = calib[0].len();
    let homologous = fp_window_output(&fp, w, &q, seq).unwrap();
    let out = qm.block_output(1, &q, seq, true).unwrap();
    assert!(distance_value(&homologous, &out, DistanceKind::L2Kl, calib.len()).unwrap() < 1e-3);
}

#[test]
fn window_loss_is_at_least_the_regulariser() {
    let (qm, calib) = prepared(3, (4, 4), 9);
    let (f, q) = qm.capture_block_io(&calib, 1).unwrap();
    let tape = Tape::new();
    let s = ReconSettings::default();
    let wl = window_loss(&tape, &qm, Window { l: 2, k: 3 }, &f, &q, calib[0].len(), &s, 9, 10).unwrap();
    let reg = wl.reg.expect("regulariser active late in the window").item();
    assert!(reg > 0.0);
    assert!(wl.total.item() >= reg);
}

#[test]
fn export_round_trips_and_dequantizes_exactly() {
    let (mut qm, calib) = prepared(2, (4, 8), 10);
    run_pipeline(&mut qm, &calib, &settings(2, 1)).unwrap();
    let ckpt = qm.export().unwrap();
    let bytes = ckpt.to_bytes();
    let back = QuantizedCheckpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes(), bytes);

    // stored codes reproduce the in-memory deployed weights bit for bit
    for (b, (block, stored)) in qm.blocks.iter().zip(&back.blocks).enumerate() {
        let tape = Tape::new();
        let (vars, _) = block.on_tape(&tape, &qm.fp.blocks[b], qm.fp.config.heads, false, true).unwrap();
        for (w, lin) in vars.weights.iter().zip(&stored.linears) {
            assert_eq!(*w.value(), lin.dequantized().unwrap());
        }
    }
    let chunks = vec![calib[0].clone()];
    assert_eq!(perplexity_of_chunks(&ckpt, &chunks).unwrap(), perplexity_of_chunks(&back, &chunks).unwrap());
    assert_eq!(back.final_hidden(&chunks).unwrap(), LanguageModel::final_hidden(&ckpt, &chunks).unwrap());

    let mut corrupt = bytes.clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0x10;
    assert!(matches!(QuantizedCheckpoint::from_bytes(&corrupt), Err(cbq::Error::Checksum)));
}
