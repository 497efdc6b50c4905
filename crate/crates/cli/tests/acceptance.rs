//! Acceptance suite. Every criterion prints exactly one line:
//! `ACCEPTANCE <n> <PASS|FAIL> <name> | <detail>`.
//!
//! Criteria 5–7 share trained models (one per seed and configuration)
//! through a process-wide cache.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use actgen_core::ablation::{run_ablation_with, AblationGrid, AblationReport, Figure, ModelCache, SpecialPhrases, Subset};
use actgen_core::baselines::{knn_generate, ngram_generate, train_class_ngram, Generated, Handcrafted, NgramConfig, TemplateStore};
use actgen_core::cnn::CnnGrads;
use actgen_core::corpus::{generate_corpus, prepare, split, Prepared};
use actgen_core::decoder::{generate, slot_error, slot_error_ids, DecodeConfig};
use actgen_core::delex::{Vocabulary, BOS_ID, EOS_ID};
use actgen_core::evaluation::{bleu4, build_references, evaluate_system};
use actgen_core::generator::RnnGrads;
use actgen_core::neural::Parameters;
use actgen_core::ontology::{encode_control, ActType, Category, SlotId, SlotValue};
use actgen_core::{
    CnnModel, DelexUtterance, DialogueAct, Direction, EmbeddingTable, Matrix, ModelBundle, Ontology, RnnLm, TemplatePack,
    TrainConfig,
};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [1, 2, 3];
const CORPUS_SIZE: usize = 2000;
const CORPUS_SEED: u64 = 1;

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!("ACCEPTANCE {n} {} {name} | {detail}\n", if pass { "PASS" } else { "FAIL" });
    // written past the test harness's capture so the line always shows
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

// ------------------------------------------------------------ shared state

struct Shared {
    ont: Ontology,
    corpus: Vec<Prepared>,
    cache: ModelCache,
    special: SpecialPhrases,
    train_time: Duration,
}

fn shared() -> &'static Mutex<Shared> {
    static S: OnceLock<Mutex<Shared>> = OnceLock::new();
    S.get_or_init(|| {
        let ont = Ontology::restaurant();
        let pack = TemplatePack::restaurant();
        let raw = generate_corpus(&ont, &pack, CORPUS_SIZE, CORPUS_SEED).unwrap();
        let (corpus, _) = prepare(&ont, &raw).unwrap();
        let cache = ModelCache::new(&ont, split(&corpus, CORPUS_SEED), TrainConfig::default());
        let special = SpecialPhrases::from_pack(&ont, &pack).unwrap();
        Mutex::new(Shared { ont, corpus, cache, special, train_time: Duration::ZERO })
    })
}

fn ablation() -> &'static AblationReport {
    static A: OnceLock<AblationReport> = OnceLock::new();
    A.get_or_init(|| {
        let mut s = shared().lock().unwrap_or_else(|e| e.into_inner());
        let grid = AblationGrid {
            seeds: SEEDS.to_vec(),
            decays: vec![1.0, 0.0],
            base_decay: 0.0,
            fractions: vec![0.5, 1.0],
            gate_beams: vec![20],
            gate_top_n: 5,
            top_ns: vec![1, 5, 10],
            beam: 100,
            lambda: 0.0,
            ..AblationGrid::default()
        };
        let Shared { ont, corpus, cache, special, .. } = &mut *s;
        run_ablation_with(ont, &grid, corpus, special, cache).unwrap()
    })
}

// ------------------------------------------------------------ 1. gradients

fn small_vocab(ont: &Ontology) -> Vocabulary {
    let mut tokens = Vocabulary::reserved(ont);
    tokens.extend(["a", "b", "c", "is", "the", "."].map(String::from));
    Vocabulary::from_tokens(ont, tokens).unwrap()
}

fn random_act<R: Rng>(ont: &Ontology, rng: &mut R, max_pairs: usize) -> DialogueAct {
    let mut da = DialogueAct::new(ActType(rng.random_range(0..ont.num_acts())));
    for _ in 0..rng.random_range(0..=max_pairs) {
        let slot = SlotId(rng.random_range(0..ont.num_slots()));
        let value = if ont.is_binary(slot) {
            [SlotValue::Yes, SlotValue::No, SlotValue::DontCare].choose(rng).unwrap().clone()
        } else {
            match rng.random_range(0..4) {
                0 => SlotValue::DontCare,
                1 => SlotValue::Unvalued,
                _ => SlotValue::Categorical(format!("v{}", rng.random_range(0..3))),
            }
        };
        da = da.with(slot, value);
    }
    da
}

/// Central differences, one coordinate at a time, summed per loss term.
fn numeric_grad(terms: &mut dyn FnMut(&[f64]) -> Vec<f64>, params: &[f64], eps: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    let mut out = vec![0.0; p.len()];
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let plus = terms(&p);
        p[i] = orig - eps;
        let minus = terms(&p);
        p[i] = orig;
        out[i] = plus.iter().zip(&minus).map(|(a, b)| a - b).sum::<f64>() / (2.0 * eps);
    }
    out
}

fn max_rel_err(a: &[f64], n: &[f64]) -> f64 {
    a.iter()
        .zip(n)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

#[test]
fn criterion_1_gradients() {
    let t0 = Instant::now();
    let ont = Ontology::restaurant();
    let v = small_vocab(&ont);
    let (h, hid) = (5, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_rnn: f64 = 0.0;
    let mut worst_cnn: f64 = 0.0;
    for decay in [0.0, 0.7, 1.0] {
        for direction in [Direction::Forward, Direction::Backward] {
            for _ in 0..4 {
                let m = RnnLm::uniform(v.len(), h, hid, ont.control_dim(), direction, decay, 0.5, &mut rng);
                let emb = EmbeddingTable::uniform(v.len(), h, 0.5, &mut rng);
                let da = random_act(&ont, &mut rng, 3);
                let cv = encode_control(&ont, &da);
                let len = rng.random_range(0..=4);
                let mut toks = vec![BOS_ID];
                toks.extend((0..len).map(|_| rng.random_range(3..v.len())));
                toks.push(EOS_ID);
                let mut grads = RnnGrads(m.clone());
                grads.zero();
                let mut eg = Matrix::zeros(v.len(), h);
                m.loss_and_grad(&emb, &v, &toks, &cv, &mut grads, &mut eg);
                let mut flat = m.flatten();
                let cut = flat.len();
                flat.extend_from_slice(emb.0.data());
                let mut analytic = grads.flatten();
                analytic.extend_from_slice(eg.data());
                let numeric = numeric_grad(
                    &mut |p| {
                        let mut m2 = m.clone();
                        m2.assign(&p[..cut]);
                        let e2 = EmbeddingTable(Matrix::from_vec(v.len(), h, p[cut..].to_vec()));
                        vec![m2.sequence_nll(&e2, &v, &toks, &cv).unwrap()]
                    },
                    &flat,
                    1e-5,
                );
                worst_rnn = worst_rnn.max(max_rel_err(&analytic, &numeric));
            }
        }
    }
    for widths in [vec![1, 2, 3, 4], vec![2, 3]] {
        for _ in 0..3 {
            let m = CnnModel::uniform(&widths, h, hid, ont.num_acts(), ont.slot_bits(), 1.0, &mut rng);
            let emb = EmbeddingTable::uniform(v.len(), h, 1.0, &mut rng);
            let cv = encode_control(&ont, &random_act(&ont, &mut rng, 3));
            let len = rng.random_range(0..=4);
            let mut toks = vec![BOS_ID];
            toks.extend((0..len).map(|_| rng.random_range(3..v.len())));
            toks.push(EOS_ID);
            let mut grads = CnnGrads(m.clone());
            grads.zero();
            let mut eg = Matrix::zeros(v.len(), h);
            m.loss_and_grad(&emb, &toks, &cv, &mut grads, &mut eg);
            let mut flat = m.flatten();
            let cut = flat.len();
            flat.extend_from_slice(emb.0.data());
            let mut analytic = grads.flatten();
            analytic.extend_from_slice(eg.data());
            let numeric = numeric_grad(
                &mut |p| {
                    let mut m2 = m.clone();
                    m2.assign(&p[..cut]);
                    let e2 = EmbeddingTable(Matrix::from_vec(v.len(), h, p[cut..].to_vec()));
                    m2.loss_terms(&e2, &toks, &cv).unwrap()
                },
                &flat,
                1e-5,
            );
            worst_cnn = worst_cnn.max(max_rel_err(&analytic, &numeric));
        }
    }
    let elapsed = t0.elapsed();
    let pass = worst_rnn < 1e-4 && worst_cnn < 1e-4 && elapsed < Duration::from_secs(10);
    report(
        1,
        "gradient correctness",
        pass,
        &format!("max rel err rnn {worst_rnn:.2e}, cnn {worst_cnn:.2e}; |V|={}, H=h=5; {elapsed:.2?}", v.len()),
    );
    assert!(pass);
}

// ------------------------------------------------------------ 2. gating

/// Independent gate: value bits of emitted slots scaled by δ^(t−t_s).
fn oracle_features(ont: &Ontology, v: &Vocabulary, da: &DialogueAct, decay: f64, seq: &[usize], t: usize) -> Vec<f64> {
    let mut f = encode_control(ont, da).as_slice().to_vec();
    for s in ont.slot_ids() {
        let Some(tok) = v.slot_token_id(s) else { continue };
        if let Some(ts) = seq[..=t].iter().position(|&x| x == tok) {
            let bit = ont.slot_bit(s, Category::Value);
            f[bit] *= decay.powi((t - ts) as i32);
        }
    }
    f
}

#[test]
fn criterion_2_gating_invariant() {
    let ont = Ontology::restaurant();
    let v = small_vocab(&ont);
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut failures = 0usize;
    let mut gated_steps = 0usize;
    let mut samples = 0usize;
    for decay in [0.0, 1.0] {
        for seed in 0..500u64 {
            let m = RnnLm::uniform(v.len(), 6, 8, ont.control_dim(), Direction::Forward, decay, 1.0, &mut rng);
            let emb = EmbeddingTable::uniform(v.len(), 6, 1.0, &mut rng);
            let da = random_act(&ont, &mut rng, 4);
            let cv = encode_control(&ont, &da);
            let s = m.sample_utterance(&emb, &v, &cv, decay, 12, &mut ChaCha8Rng::seed_from_u64(seed));
            samples += 1;
            let seq = &s.tokens;
            let mut h = vec![0.0; 8];
            for t in 0..seq.len() - 1 {
                let f = oracle_features(&ont, &v, &da, decay, seq, t);
                // invariant on the features themselves
                for slot in ont.slot_ids() {
                    let bit = ont.slot_bit(slot, Category::Value);
                    let emitted = v.slot_token_id(slot).and_then(|tok| seq[..t].iter().position(|&x| x == tok));
                    if decay == 0.0 && emitted.is_some() {
                        gated_steps += 1;
                        if f[bit] != 0.0 {
                            failures += 1;
                        }
                    }
                }
                if decay == 1.0 && f != cv.as_slice() {
                    failures += 1;
                }
                // the sampler must have used exactly these features
                let (h2, p) = m.rnn_step(&emb, seq[t], &f, &h);
                if p[seq[t + 1]].to_bits() != s.step_probs[t].to_bits() {
                    failures += 1;
                }
                h = h2;
            }
        }
    }
    let pass = failures == 0 && samples == 1000 && gated_steps > 0;
    report(
        2,
        "gating invariant",
        pass,
        &format!("{samples} samples, {gated_steps} post-emission value bits checked, {failures} violations"),
    );
    assert!(pass);
}

// ------------------------------------------------------------ 3. slot error

fn brute_force_err(ont: &Ontology, tokens: &[String], da: &DialogueAct) -> usize {
    let mut total = 0;
    for s in ont.slot_ids() {
        let Some(tok) = ont.slot_token(s) else { continue };
        let occurrences = tokens.iter().filter(|t| **t == tok).count();
        let required = da.pairs.iter().filter(|(ps, v)| *ps == s && matches!(v, SlotValue::Categorical(_))).count();
        if occurrences == 0 {
            total += required;
        } else if occurrences > required {
            total += occurrences - required;
        }
    }
    total
}

#[test]
fn criterion_3_err_oracle() {
    let ont = Ontology::restaurant();
    let v = small_vocab(&ont);
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut mismatches = 0;
    let mut nonzero = 0;
    for _ in 0..10_000 {
        let da = random_act(&ont, &mut rng, 5);
        let n = rng.random_range(0..12);
        let ids: Vec<usize> = std::iter::once(BOS_ID)
            .chain((0..n).map(|_| rng.random_range(3..v.len())))
            .chain(std::iter::once(EOS_ID))
            .collect();
        let words = v.decode(&ids);
        let expected = brute_force_err(&ont, &words, &da);
        let got = slot_error(&ont, &DelexUtterance { tokens: words, lex_map: Vec::new() }, &da);
        let got_ids = slot_error_ids(&ont, &v, &ids, &da);
        if got != expected || got_ids != expected {
            mismatches += 1;
        }
        nonzero += usize::from(expected > 0);
    }
    let pass = mismatches == 0;
    report(3, "slot error oracle", pass, &format!("10000 pairs ({nonzero} with ERR>0), {mismatches} mismatches"));
    assert!(pass);
}

// ------------------------------------------------------------ 4. BLEU

/// Brute-force corpus BLEU-4 with plain lists and linear scans.
fn oracle_bleu(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
    let grams = |s: &[String], n: usize| -> Vec<Vec<String>> {
        if s.len() < n {
            return Vec::new();
        }
        (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
    };
    let count = |list: &[Vec<String>], g: &Vec<String>| list.iter().filter(|x| *x == g).count();
    let mut num = [0usize; 4];
    let mut den = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rs) in hyps.iter().zip(refs) {
        for n in 1..=4 {
            let hg = grams(h, n);
            let mut seen: Vec<Vec<String>> = Vec::new();
            for g in &hg {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g.clone());
                let max_ref = rs.iter().map(|x| count(&grams(x, n), g)).max().unwrap_or(0);
                num[n - 1] += count(&hg, g).min(max_ref);
            }
            den[n - 1] += hg.len();
        }
        c += h.len();
        let mut best = rs[0].len();
        for x in rs {
            let (d, bd) = (x.len().abs_diff(h.len()), best.abs_diff(h.len()));
            if d < bd || (d == bd && x.len() < best) {
                best = x.len();
            }
        }
        r += best;
    }
    if num.iter().any(|&x| x == 0) || c == 0 {
        return 0.0;
    }
    let mut log = 0.0;
    for i in 0..4 {
        log += (num[i] as f64 / den[i] as f64).ln();
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (log / 4.0).exp()
}

#[test]
fn criterion_4_bleu_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let words = ["a", "b", "c", "d", "e"];
    let mut worst: f64 = 0.0;
    let mut nonzero = 0;
    for _ in 0..50 {
        let pairs = rng.random_range(1..=4);
        let mut hyps = Vec::new();
        let mut refs = Vec::new();
        for _ in 0..pairs {
            let len = rng.random_range(1..=9);
            let h: Vec<String> = (0..len).map(|_| words.choose(&mut rng).unwrap().to_string()).collect();
            let mut rs = Vec::new();
            for _ in 0..rng.random_range(1..=3) {
                // perturbed copies keep higher-order overlap likely
                let mut r: Vec<String> = h.clone();
                for _ in 0..rng.random_range(0..=2) {
                    match rng.random_range(0..3) {
                        0 if !r.is_empty() => {
                            let i = rng.random_range(0..r.len());
                            r[i] = words.choose(&mut rng).unwrap().to_string();
                        }
                        1 => r.insert(rng.random_range(0..=r.len()), words.choose(&mut rng).unwrap().to_string()),
                        _ if r.len() > 1 => {
                            r.remove(rng.random_range(0..r.len()));
                        }
                        _ => {}
                    }
                }
                rs.push(r);
            }
            hyps.push(h);
            refs.push(rs);
        }
        let got = bleu4(&hyps, &refs).unwrap();
        let want = oracle_bleu(&hyps, &refs);
        worst = worst.max((got - want).abs());
        nonzero += usize::from(want > 0.0);
    }
    // echo system on the shipped corpus
    let ont = Ontology::restaurant();
    let raw = generate_corpus(&ont, &TemplatePack::restaurant(), 500, 9).unwrap();
    let (corpus, _) = prepare(&ont, &raw).unwrap();
    let test = split(&corpus, 9).test;
    let (refs, _) = build_references(&ont, &corpus, &test);
    let by_act: HashMap<String, &Prepared> = test.iter().map(|p| (p.da.render(&ont), p)).collect();
    let echo = evaluate_system(&ont, "echo", serde_json::Value::Null, &test, &refs, &[0], |_, da| {
        let p = by_act[&da.render(&ont)];
        Generated::from_delex(&ont, p.delex.clone(), da)
    })
    .unwrap();
    let pass = worst < 1e-12 && echo.bleu == 1.0 && echo.err == 0.0;
    report(
        4,
        "BLEU oracle",
        pass,
        &format!("50 cases ({nonzero} nonzero), max |diff| {worst:.1e}; echo BLEU {} ERR {}", echo.bleu, echo.err),
    );
    assert!(pass);
}

// ------------------------------------------------------------ 5. system ordering

fn rnn_output(b: &ModelBundle, da: &DialogueAct, cfg: &DecodeConfig) -> Generated {
    let d = generate(&b.models(), da, cfg);
    let c = d.output();
    let delex = DelexUtterance { tokens: b.vocab.decode(&c.tokens), lex_map: Vec::new() };
    Generated { surface: c.surface.clone(), delex, err: c.err }
}

#[test]
fn criterion_5_system_ordering() {
    let t0 = Instant::now();
    let mut s = shared().lock().unwrap_or_else(|e| e.into_inner());
    let ont = s.ont.clone();
    let corpus = s.corpus.clone();
    let data = s.cache.split().clone();
    let (refs, _) = build_references(&ont, &corpus, &data.test);
    let null = serde_json::Value::Null;

    let mut rnn_bleu = Vec::new();
    let mut rnn_err = Vec::new();
    for seed in SEEDS {
        let t = Instant::now();
        let b = s.cache.get(0.0, 1.0, seed).unwrap().clone();
        s.train_time += t.elapsed();
        let cfg = DecodeConfig { beam: 100, top_n: 1, lambda: 100.0, seed, ..DecodeConfig::default() };
        let r = evaluate_system(&ont, "rnn", null.clone(), &data.test, &refs, &[seed], |_, da| rnn_output(&b, da, &cfg)).unwrap();
        rnn_bleu.push(r.bleu);
        rnn_err.push(r.err);
    }
    let store = TemplateStore::build(&ont, &data.train);
    let knn = evaluate_system(&ont, "knn", null.clone(), &data.test, &refs, &SEEDS, |_, da| knn_generate(&ont, &store, da)).unwrap();
    let hand = Handcrafted::restaurant();
    let hc = evaluate_system(&ont, "handcrafted", null.clone(), &data.test, &refs, &SEEDS, |_, da| hand.generate(&ont, da)).unwrap();
    let lm = train_class_ngram(&data.train, 3, 5).unwrap();
    let ng = evaluate_system(&ont, "ngram", null, &data.test, &refs, &SEEDS, |seed, da| {
        ngram_generate(&ont, &lm, da, &NgramConfig { seed, ..NgramConfig::default() })
    })
    .unwrap();
    drop(s);

    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let (rb, re) = (mean(&rnn_bleu), mean(&rnn_err));
    let elapsed = t0.elapsed();
    let a = re == 0.0;
    let b = rb > knn.bleu && knn.bleu > hc.bleu;
    let c = ng.err > 0.0;
    let fast = elapsed < Duration::from_secs(15 * 60);
    let pass = a && b && c && fast;
    report(
        5,
        "system ordering",
        pass,
        &format!(
            "(a) rnn ERR {re} [{}]; (b) BLEU rnn {rb:.4} {:?} > knn {:.4} > handcrafted {:.4} [{}]; (c) ngram k3n5 ERR {:.1} BLEU {:.4} [{}]; {} test acts, seeds {:?}, {elapsed:.0?}",
            ok(a),
            rnn_bleu.iter().map(|x| (x * 1e4).round() / 1e4).collect::<Vec<_>>(),
            knn.bleu,
            hc.bleu,
            ok(b),
            ng.err,
            ng.bleu,
            ok(c),
            data.test.len(),
            SEEDS,
        ),
    );
    assert!(pass);
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "violated"
    }
}

// ------------------------------------------------------------ 6. ablations

#[test]
fn criterion_6_ablation_trends() {
    let rep = ablation();
    let cell = |f: Figure, p: &dyn Fn(&actgen_core::ablation::AblationCell) -> bool| rep.find(f, p).unwrap().clone();
    let d1 = cell(Figure::Gate, &|c| c.decay == 1.0);
    let d0 = cell(Figure::Gate, &|c| c.decay == 0.0);
    let gate = d0.bleu >= d1.bleu && d0.err <= d1.err;
    let mut detail = format!(
        "gate (beam 20, top-5): δ=0 BLEU {:.4} ERR {:.1} vs δ=1 BLEU {:.4} ERR {:.1} [{}]",
        d0.bleu,
        d0.err,
        d1.bleu,
        d1.err,
        ok(gate)
    );

    let mut cnn = true;
    detail.push_str("; cnn hard-subset mismatches (ERR+special, expected over the top-n draw; drawn in parens) on/off:");
    for n in [1, 5, 10] {
        let on = cell(Figure::Cnn, &|c| c.subset == Subset::Hard && c.top_n == n && c.use_cnn);
        let off = cell(Figure::Cnn, &|c| c.subset == Subset::Hard && c.top_n == n && !c.use_cnn);
        let (a, b) = (on.err + on.special_err, off.err + off.special_err);
        cnn &= a <= b;
        let (da, db) = (on.err_drawn + on.special_err_drawn, off.err_drawn + off.special_err_drawn);
        detail.push_str(&format!(" top{n} {a:.1}/{b:.1} ({da:.1}/{db:.1})"));
    }
    detail.push_str(&format!(" [{}]", ok(cnn)));

    let mut bwd = true;
    let mut with_bwd = Vec::new();
    detail.push_str("; backward BLEU on/off:");
    for n in [1, 5, 10] {
        let on = cell(Figure::Backward, &|c| c.top_n == n && c.use_backward);
        let off = cell(Figure::Backward, &|c| c.top_n == n && !c.use_backward);
        bwd &= on.bleu >= off.bleu;
        with_bwd.push(on.bleu);
        detail.push_str(&format!(" top{n} {:.4}/{:.4}", on.bleu, off.bleu));
    }
    detail.push_str(&format!(" [{}]", ok(bwd)));
    let topn = with_bwd[0] >= with_bwd[1] && with_bwd[1] >= with_bwd[2];
    detail.push_str(&format!("; top-n BLEU {:.4} ≥ {:.4} ≥ {:.4} [{}]", with_bwd[0], with_bwd[1], with_bwd[2], ok(topn)));
    let pass = gate && cnn && bwd && topn;
    report(6, "ablation trends", pass, &detail);
    assert!(pass);
}

// ------------------------------------------------------------ 7. corpus size

#[test]
fn criterion_7_corpus_size() {
    let rep = ablation();
    let get = |f: f64, n: usize| rep.find(Figure::Size, |c| c.fraction == f && c.top_n == n).unwrap().bleu;
    let (t1_half, t1_full) = (get(0.5, 1), get(1.0, 1));
    let (t5_half, t5_full) = (get(0.5, 5), get(1.0, 5));
    let rel = (t1_half - t1_full).abs() / t1_full;
    let pass = rel <= 0.05 && t5_half < t5_full;
    report(
        7,
        "corpus size",
        pass,
        &format!(
            "top-1 BLEU 50% {t1_half:.4} vs 100% {t1_full:.4} (rel diff {:.2}%); top-5 BLEU 50% {t5_half:.4} < 100% {t5_full:.4} [{}]",
            rel * 100.0,
            ok(t5_half < t5_full)
        ),
    );
    assert!(pass);
}

// ------------------------------------------------------------ 8. determinism

fn actgen(dir: &Path, args: &[&str]) -> (i32, Vec<u8>) {
    let out = Command::new(env!("CARGO_BIN_EXE_actgen"))
        .args(args)
        .current_dir(dir)
        .env_remove("ACTGEN_SEED")
        .output()
        .unwrap();
    (out.status.code().unwrap_or(-1), out.stdout)
}

#[test]
fn criterion_8_determinism() {
    let runs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    let grid = "seeds = [1, 2]\ncorpus_size = 150\ndecays = [1.0, 0.0]\nfractions = [0.5, 1.0]\ngate_beams = [5]\nbeam = 10\n\
                [train]\nembed_size = 6\nhidden_size = 8\ncnn_hidden = 6\nmax_epochs = 2\n";
    let config = "embed_size = 6\nhidden_size = 8\ncnn_hidden = 6\nmax_epochs = 2\n";
    let commands: Vec<Vec<&str>> = vec![
        vec!["corpus", "--count", "200", "--seed", "5", "--out", "corpus.jsonl"],
        vec!["train", "--corpus", "corpus.jsonl", "--config", "train.toml", "--seed", "3", "--out-model", "model.json"],
        vec!["generate", "--model", "model.json", "--da", "inform(name=nopa,food=thai,kidsallowed=yes)", "--beam", "20", "--top-n", "5", "--seed", "4"],
        vec!["evaluate", "--model", "model.json", "--corpus", "corpus.jsonl", "--seeds", "1,2", "--beam", "10", "--json", "eval.json"],
        vec!["ablate", "--grid", "grid.toml", "--out", "ablation"],
    ];
    let mut outputs: Vec<Vec<(i32, Vec<u8>)>> = Vec::new();
    for dir in &runs {
        std::fs::write(dir.path().join("train.toml"), config).unwrap();
        std::fs::write(dir.path().join("grid.toml"), grid).unwrap();
        outputs.push(commands.iter().map(|c| actgen(dir.path(), c)).collect());
    }
    let files = ["corpus.jsonl", "model.json", "eval.json", "ablation/ablation.tsv", "ablation/ablation.json", "ablation/gate.csv", "ablation/size.csv"];
    let mut problems = Vec::new();
    for (i, c) in commands.iter().enumerate() {
        if outputs[0][i].0 != 0 {
            problems.push(format!("{} exited {}", c[0], outputs[0][i].0));
        }
        if outputs[0][i] != outputs[1][i] {
            problems.push(format!("{} stdout differs", c[0]));
        }
    }
    for f in files {
        let a = std::fs::read(runs[0].path().join(f));
        let b = std::fs::read(runs[1].path().join(f));
        match (a, b) {
            (Ok(a), Ok(b)) if a == b => {}
            _ => problems.push(format!("{f} differs or is missing")),
        }
    }
    // serialization round trip, bit for bit
    let path = runs[0].path().join("model.json");
    let bundle = ModelBundle::load(&path).unwrap();
    let again = ModelBundle::from_json(&bundle.to_json()).unwrap();
    let resaved = runs[0].path().join("resaved.json");
    again.save(&resaved).unwrap();
    let bit_exact = again == bundle
        && bundle.flatten_all().iter().zip(again.flatten_all()).all(|(a, b)| a.to_bits() == b.to_bits())
        && std::fs::read(&path).unwrap() == std::fs::read(&resaved).unwrap();
    if !bit_exact {
        problems.push("model round trip is not bit-exact".into());
    }
    let pass = problems.is_empty();
    report(
        8,
        "determinism",
        pass,
        &if pass {
            format!("{} CLI commands and {} output files identical across two runs; model round trip bit-exact", commands.len(), files.len())
        } else {
            problems.join("; ")
        },
    );
    assert!(pass);
}

trait FlattenAll {
    fn flatten_all(&self) -> Vec<f64>;
}

impl FlattenAll for ModelBundle {
    fn flatten_all(&self) -> Vec<f64> {
        let mut v = self.emb.0.data().to_vec();
        v.extend(self.fwd.flatten());
        v.extend(self.bwd.flatten());
        v.extend(self.cnn.flatten());
        v
    }
}
