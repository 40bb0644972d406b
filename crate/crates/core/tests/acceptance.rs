//! Acceptance suite. Runs every criterion in order, prints one
//! `PASS`/`FAIL`/`SKIP` line per criterion, and exits non-zero on any failure.

use std::time::{Duration, Instant};

use g2p_core::analysis::{attention_maps, export_attention};
use g2p_core::autodiff::Graph;
use g2p_core::checkpoint::{encode, load_checkpoint, save_checkpoint};
use g2p_core::data::{
    convert_databaker, gen_sandhi_corpus, load_corpus_str, split_corpus, word_length_stats, Corpus,
    VocabMode,
};
use g2p_core::model::G2pModel;
use g2p_core::params::Component;
use g2p_core::reinforcer::{
    shift_sequence, sso_pre_activation, sso_weight_as_conv_kernel, ReinforcerConfig, ReinforcerKind,
};
use g2p_core::sequence::{LmConfig, LmKind};
use g2p_core::tensor::{conv1d, Tensor};
use g2p_core::train::{evaluate, train, ModelSpec, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const EQUIV_TOL: f64 = 1e-10;
const POINTWISE_MAX: f64 = 75.0;
const NEIGHBOUR_MIN: f64 = 99.0;
const OVERFIT_MIN: f64 = 99.0;
const FROZEN_GAIN_MIN: f64 = 20.0;
const PCT_TOL: f64 = 0.01;
const ROW_SUM_TOL: f64 = 1e-6;
const SOFT_ACC_MIN: f64 = 90.0;
const SOFT_GAP_MIN: f64 = 1.5;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn sandhi(n: usize, seed: u64) -> Corpus {
    let s = gen_sandhi_corpus(n, seed);
    load_corpus_str(&s.text, Some(&s.lexicon), VocabMode::Build).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    // same points at a coarser step, reported for diagnosis only
    let mut worst_coarse = 0.0f64;
    let mut cases = 0;
    for seed in 0..3u64 {
        let full = gen_sandhi_corpus(400, 100 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // truncate to T <= 6 and relabel with the oracle
        let mut text = String::new();
        for chars in full.sentences.iter().take(3) {
            let t = rng.gen_range(2..=6);
            let cut = &chars[..t.min(chars.len())];
            let gold = g2p_core::data::apply_sandhi(cut).unwrap();
            text.extend(cut.iter());
            text.push('\t');
            text.push_str(&gold.join(" "));
            text.push('\n');
        }
        let corpus = load_corpus_str(&text, Some(&full.lexicon), VocabMode::Build).unwrap();
        let batch: Vec<_> = corpus.samples.iter().collect();
        if batch.iter().all(|s| s.polyphone_positions.is_empty()) {
            continue;
        }
        for r in [ReinforcerKind::None, ReinforcerKind::Conv, ReinforcerKind::Sso] {
            for lm in [LmKind::Transformer, LmKind::Mixer] {
                let mut cfg = LmConfig::new(lm, 1, 8, 6);
                cfg.num_heads = 2;
                let mut model = G2pModel::<f64>::new(
                    8,
                    ReinforcerConfig::new(r),
                    cfg,
                    corpus.vocab.clone(),
                    corpus.dict.clone(),
                    seed,
                )
                .unwrap();
                model.randomize(0.5, &mut rng);
                let report = model.grad_check(&batch, 0.1, GRAD_H).unwrap();
                worst = worst.max(report.max_rel_error);
                worst_coarse = worst_coarse.max(model.grad_check(&batch, 0.1, 1e-4).unwrap().max_rel_error);
                cases += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        cases >= 6 && worst < GRAD_TOL && elapsed < Duration::from_secs(60),
        format!(
            "{cases} cases, max relative error {worst:.2e} (< {GRAD_TOL:e}), {elapsed:.1?}; at h=1e-4: {worst_coarse:.2e}"
        ),
    )
}

fn sso_conv_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let t = rng.gen_range(1..=16);
        let d = rng.gen_range(1..=8);
        let s = rng.gen_range(1..=2usize);
        let e = random(&[t, d], &mut rng);
        let w_bar = random(&[(2 * s + 1) * d, d], &mut rng);
        let bias = random(&[d], &mut rng);
        let mut g = Graph::new();
        let (ev, wv, bv) = (g.leaf(e.clone()), g.leaf(w_bar.clone()), g.leaf(bias.clone()));
        let pre = sso_pre_activation(&mut g, ev, wv, Some(bv), s).unwrap();
        let kernel = sso_weight_as_conv_kernel(&w_bar, s).unwrap();
        let conv = conv1d(&e, &kernel, Some(&bias), s, 1).unwrap();
        worst = worst.max(g.value(pre).max_abs_diff(&conv));
    }
    let mut sizes_equal = true;
    for d in 1..=8 {
        for s in 1..=2 {
            let conv = ReinforcerConfig {
                kernel_size: 2 * s + 1,
                ..ReinforcerConfig::new(ReinforcerKind::Conv)
            };
            let sso = ReinforcerConfig {
                shift_size: s,
                ..ReinforcerConfig::new(ReinforcerKind::Sso)
            };
            sizes_equal &= conv.param_count(d) == sso.param_count(d);
        }
    }
    check(
        worst < EQUIV_TOL && sizes_equal,
        format!("100 cases, max |sso - conv| {worst:.2e} (< {EQUIV_TOL:e}), parameter counts equal: {sizes_equal}"),
    )
}

fn shift_semantics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut cases = 0;
    let mut mismatches = 0;
    for t in 1..=8usize {
        let e = random(&[t, 3], &mut rng);
        for k in -(t as isize)..=(t as isize) {
            let out = shift_sequence(&e, k).unwrap();
            for row in 0..t {
                let src = row as isize - k;
                for col in 0..3 {
                    let want = if (0..t as isize).contains(&src) {
                        e.at(&[src as usize, col])
                    } else {
                        0.0
                    };
                    mismatches += (out.at(&[row, col]) != want) as usize;
                }
            }
            cases += 1;
        }
    }
    check(mismatches == 0, format!("{cases} (T, k) pairs, {mismatches} mismatching entries"))
}

fn neighbourhood_separation() -> Outcome {
    let start = Instant::now();
    let synth = gen_sandhi_corpus(2000, 0);
    let bayes = 100.0 * synth.pointwise_bayes_rate;
    let corpus = load_corpus_str(&synth.text, Some(&synth.lexicon), VocabMode::Build).unwrap();
    let split = split_corpus(&corpus.samples, (8.0, 1.0, 1.0), 0).unwrap();
    let cfg = TrainConfig {
        epochs: 300,
        eval_every: 10,
        ..TrainConfig::default()
    };
    let mut acc = Vec::new();
    for kind in [ReinforcerKind::None, ReinforcerKind::Conv, ReinforcerKind::Sso] {
        let spec = ModelSpec {
            embed_dim: 32,
            reinforcer: ReinforcerConfig::new(kind),
            lm: LmConfig::new(LmKind::Identity, 0, 32, 16),
        };
        let mut model = spec.build::<f64>(&corpus.vocab, &corpus.dict, 0).unwrap();
        train(&mut model, &split.train, &split.val, &cfg).unwrap();
        acc.push(evaluate(&model, &split.test, true).unwrap());
    }
    let elapsed = start.elapsed();
    check(
        bayes <= POINTWISE_MAX
            && acc[0] <= POINTWISE_MAX
            && acc[1] >= NEIGHBOUR_MIN
            && acc[2] >= NEIGHBOUR_MIN
            && elapsed < Duration::from_secs(600),
        format!(
            "pointwise Bayes rate {bayes:.2}%, test accuracy none {:.2}% (<= {POINTWISE_MAX}), conv {:.2}%, sso {:.2}% (>= {NEIGHBOUR_MIN}), {elapsed:.1?}",
            acc[0], acc[1], acc[2]
        ),
    )
}

fn overfit_sanity() -> Outcome {
    let start = Instant::now();
    let corpus = sandhi(64, 0);
    let spec = ModelSpec {
        embed_dim: 64,
        reinforcer: ReinforcerConfig::new(ReinforcerKind::Sso),
        lm: LmConfig::new(LmKind::Mixer, 1, 64, 16),
    };
    let mut model = spec.build::<f64>(&corpus.vocab, &corpus.dict, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 300,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &corpus.samples, &[], &cfg).unwrap();
    let acc = evaluate(&model, &corpus.samples, true).unwrap();
    let last = *report.epoch_losses.last().unwrap();
    let elapsed = start.elapsed();
    check(
        acc >= OVERFIT_MIN && last < report.initial_train_loss && elapsed < Duration::from_secs(120),
        format!(
            "train accuracy {acc:.2}% (>= {OVERFIT_MIN}), loss {:.4} -> {last:.4}, {elapsed:.1?}",
            report.initial_train_loss
        ),
    )
}

fn frozen_mode() -> Outcome {
    let corpus = sandhi(2000, 1);
    let split = split_corpus(&corpus.samples, (8.0, 1.0, 1.0), 1).unwrap();
    let spec = ModelSpec {
        embed_dim: 32,
        reinforcer: ReinforcerConfig::new(ReinforcerKind::Conv),
        lm: LmConfig::new(LmKind::Transformer, 1, 32, 16),
    };
    let mut model = spec.build::<f64>(&corpus.vocab, &corpus.dict, 1).unwrap();
    let init = model.clone();
    let before = evaluate(&model, &split.val, true).unwrap();
    let cfg = TrainConfig {
        epochs: 40,
        eval_every: 5,
        frozen: vec![Component::Lm, Component::Embedding],
        ..TrainConfig::default()
    };
    train(&mut model, &split.train, &split.val, &cfg).unwrap();
    let after = evaluate(&model, &split.val, true).unwrap();
    let mut frozen_intact = true;
    let mut trained_moved = true;
    for ((_, p), (_, q)) in model.store.iter().zip(init.store.iter()) {
        let same = p.value.data().iter().zip(q.value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        match p.component {
            Component::Lm | Component::Embedding => frozen_intact &= same,
            _ => trained_moved &= !same,
        }
    }
    check(
        frozen_intact && trained_moved && after - before >= FROZEN_GAIN_MIN,
        format!(
            "frozen tensors bit-identical: {frozen_intact}, val accuracy {before:.2}% -> {after:.2}% (gain >= {FROZEN_GAIN_MIN})"
        ),
    )
}

fn determinism() -> Outcome {
    let corpus = sandhi(64, 4);
    let split = split_corpus(&corpus.samples, (8.0, 1.0, 1.0), 4).unwrap();
    let spec = ModelSpec {
        embed_dim: 16,
        reinforcer: ReinforcerConfig::new(ReinforcerKind::Sso),
        lm: LmConfig::new(LmKind::Transformer, 1, 16, 16),
    };
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 8,
        seed: 4,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for run in 0..2 {
        let mut model = spec.build::<f64>(&corpus.vocab, &corpus.dict, 4).unwrap();
        train(&mut model, &split.train, &split.val, &cfg).unwrap();
        let path = dir.path().join(format!("run{run}"));
        save_checkpoint(&model, &path).unwrap();
        let manifest = std::fs::read(path.join("manifest.json")).unwrap();
        let params = std::fs::read(path.join("params.bin")).unwrap();
        files.push((manifest, params));
    }
    let reload: G2pModel<f64> = load_checkpoint(dir.path().join("run0")).unwrap();
    let (_, reencoded) = encode(&reload).unwrap();
    check(
        files[0] == files[1] && reencoded == files[0].1,
        format!(
            "checkpoints byte-identical: {}, reload re-encodes identically: {} ({} parameter bytes)",
            files[0] == files[1],
            reencoded == files[0].1,
            files[0].1.len()
        ),
    )
}

fn data_pipeline() -> Outcome {
    let synth = gen_sandhi_corpus(100, 5);
    let mut text = String::new();
    let mut injected = Vec::new();
    for (i, (chars, gold)) in synth.sentences.iter().zip(&synth.labels).enumerate() {
        let mut syllables = gold.clone();
        if i % 13 == 3 {
            syllables.pop();
            injected.push(i + 1);
        }
        text.extend(chars.iter());
        text.push('\t');
        text.push_str(&syllables.join(" "));
        text.push('\n');
    }
    let corpus = load_corpus_str(&text, Some(&synth.lexicon), VocabMode::Build).unwrap();
    let dropped_ok = corpus.report.dropped_lines == injected
        && corpus.report.dropped_mismatch == injected.len()
        && corpus.report.kept == 100 - injected.len();

    let split = split_corpus(&synth.sentences, (8.0, 1.0, 1.0), 5).unwrap();
    let sizes = (split.train.len(), split.val.len(), split.test.len());

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut segmented = String::new();
    for chars in &synth.sentences {
        let mut i = 0;
        while i < chars.len() {
            let len = rng.gen_range(1..=5).min(chars.len() - i);
            segmented.extend(&chars[i..i + len]);
            segmented.push(' ');
            i += len;
        }
        segmented.push('\n');
    }
    let stats = word_length_stats(&segmented, &synth.lexicon).unwrap();
    let sum_words: f64 = stats.pct_words().iter().sum();
    let sum_poly: f64 = stats.pct_poly().iter().sum();
    check(
        dropped_ok && sizes == (80, 10, 10) && (sum_words - 100.0).abs() <= PCT_TOL && (sum_poly - 100.0).abs() <= PCT_TOL,
        format!(
            "dropped {:?} (injected {injected:?}), split sizes {sizes:?}, percentage sums {sum_words:.4} / {sum_poly:.4}",
            corpus.report.dropped_lines
        ),
    )
}

fn attention_export() -> Outcome {
    let corpus = sandhi(20, 6);
    let sample = &corpus.samples[0];
    let mut rows_ok = true;
    for (layers, heads) in [(2, 4), (3, 2)] {
        let mut cfg = LmConfig::new(LmKind::Transformer, layers, 16, 16);
        cfg.num_heads = heads;
        let model = G2pModel::<f64>::new(
            16,
            ReinforcerConfig::new(ReinforcerKind::Sso),
            cfg,
            corpus.vocab.clone(),
            corpus.dict.clone(),
            6,
        )
        .unwrap();
        let export = export_attention(&model, &sample.text, 0).unwrap();
        rows_ok &= export.matrix.iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() <= ROW_SUM_TOL);
    }
    let mut cfg = LmConfig::new(LmKind::Transformer, 1, 16, 16);
    cfg.num_heads = 1;
    let single = G2pModel::<f64>::new(
        16,
        ReinforcerConfig::new(ReinforcerKind::Conv),
        cfg,
        corpus.vocab.clone(),
        corpus.dict.clone(),
        6,
    )
    .unwrap();
    let export = export_attention(&single, &sample.text, 0).unwrap();
    let raw = &attention_maps(&single, &sample.char_ids).unwrap()[0][0];
    let t = sample.len();
    let exact = (0..t).all(|i| (0..t).all(|j| export.matrix[i][j].to_bits() == raw.at(&[i, j]).to_bits()));
    check(
        rows_ok && exact,
        format!("rows sum to 1 within {ROW_SUM_TOL:e}: {rows_ok}, single-map export equals raw map exactly: {exact}"),
    )
}

/// Runs only when `G2P_DATABAKER` points at the DataBaker prosody transcript.
fn databaker_soft() -> Outcome {
    let Ok(path) = std::env::var("G2P_DATABAKER") else {
        return Outcome::Skip("set G2P_DATABAKER to the DataBaker transcript to run".into());
    };
    let source = match std::fs::read_to_string(&path) {
        Ok(s) => s,
        Err(e) => return Outcome::Fail(format!("cannot read {path}: {e}")),
    };
    let (text, conversion) = convert_databaker(&source);
    let lexicon = std::env::var("G2P_CEDICT").ok().map(|p| {
        let cedict = std::fs::read_to_string(p).expect("readable CEDICT file");
        g2p_core::data::parse_cedict(&cedict).lexicon
    });
    let corpus = load_corpus_str(&text, lexicon.as_ref(), VocabMode::Build).unwrap();
    let max_len = corpus.samples.iter().map(|s| s.len()).max().unwrap_or(1);
    let epochs = std::env::var("G2P_DATABAKER_EPOCHS")
        .ok()
        .and_then(|e| e.parse().ok())
        .unwrap_or(30);
    let cfg = TrainConfig {
        epochs,
        batch_size: 256,
        precision: g2p_core::train::Precision::F32,
        ..TrainConfig::default()
    };
    let split = split_corpus(&corpus.samples, (8.0, 1.0, 1.0), 0).unwrap();
    let mut acc = Vec::new();
    for kind in [ReinforcerKind::Conv, ReinforcerKind::None] {
        let spec = ModelSpec {
            embed_dim: 256,
            reinforcer: ReinforcerConfig::new(kind),
            lm: LmConfig::new(LmKind::Mixer, 2, 256, max_len),
        };
        let mut model = spec.build::<f32>(&corpus.vocab, &corpus.dict, 0).unwrap();
        train(&mut model, &split.train, &split.val, &cfg).unwrap();
        acc.push(evaluate(&model, &split.test, true).unwrap());
    }
    check(
        acc[0] >= SOFT_ACC_MIN && acc[0] - acc[1] >= SOFT_GAP_MIN,
        format!(
            "{} utterances converted, {} skipped; Conv-MLP-Mixer {:.2}% vs MLP-Mixer {:.2}%",
            conversion.converted,
            conversion.skipped.len(),
            acc[0],
            acc[1]
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient correctness", gradient_correctness),
        ("sso-conv equivalence", sso_conv_equivalence),
        ("shift semantics", shift_semantics),
        ("neighbourhood separation", neighbourhood_separation),
        ("overfit sanity", overfit_sanity),
        ("frozen mode", frozen_mode),
        ("determinism", determinism),
        ("data pipeline fidelity", data_pipeline),
        ("attention export", attention_export),
        ("databaker soft reproduction", databaker_soft),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let (tag, detail) = match run() {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("{tag} criterion {:>2} {name}: {detail}", i + 1);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
