use super::*;
use crate::data::generate_corpus;
use crate::model::LoraTarget;
use crate::numerics::grad_check;
use crate::tokenizers::train_bpe;
use crate::transfer::{saml_loss_dpm, saml_loss_lm};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(layers: usize, hidden: usize, vocab: usize) -> ModelConfig {
    ModelConfig {
        layers,
        heads: 2,
        hidden,
        ffn: hidden * 2,
        vocab,
        max_seq: 48,
        arch_tag: format!("t{layers}x{hidden}"),
    }
}

fn corpus(domains: &[&str], n: usize, seed: u64) -> Vec<QASample> {
    generate_corpus(domains, n, seed).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn block_eq(a: &TinyTransformer, b: &TinyTransformer, kind: ParamKind) -> bool {
    a.block_of(kind).bitwise_eq(&b.block_of(kind))
}

#[test]
fn sft_reduces_loss() {
    let tok = Tokenizer::char_level();
    let data = encode_all(&tok, &corpus(&["travel", "cooking"], 8, 1));
    let mut m = TinyTransformer::new(config(1, 16, tok.vocab_size()), &mut rng(2)).unwrap();
    let before = mean_sft_loss(&m, &data).unwrap();
    pretrain(&mut m, &data, 4, &Sgd { lr: 0.1, batch_size: 2 }, &mut rng(3)).unwrap();
    assert!(mean_sft_loss(&m, &data).unwrap() < before);
}

#[test]
fn dst_moves_only_adapters() {
    let tok = Tokenizer::char_level();
    let data = encode_all(&tok, &corpus(&["travel", "sports"], 6, 4));
    let mut m = TinyTransformer::new(config(1, 16, tok.vocab_size()), &mut rng(5)).unwrap();
    assert!(dst(&mut m, &data, 1, &Sgd::default(), &mut rng(0)).is_err());
    m.attach_domain_adapters(4, &mut rng(6)).unwrap();
    m.attach_lora(&[LoraTarget::Wq, LoraTarget::Wv], 2, &mut rng(7)).unwrap();
    let flags = m.trainable_flags();

    let before = m.clone();
    dst(&mut m, &data, 0, &Sgd::default(), &mut rng(8)).unwrap();
    for kind in [ParamKind::Base, ParamKind::Lora, ParamKind::Adapter] {
        assert!(block_eq(&m, &before, kind));
    }

    dst(&mut m, &data, 1, &Sgd::default(), &mut rng(8)).unwrap();
    assert!(block_eq(&m, &before, ParamKind::Base));
    assert!(block_eq(&m, &before, ParamKind::Lora));
    assert!(!block_eq(&m, &before, ParamKind::Adapter));
    assert_eq!(m.trainable_flags(), flags);
}

#[test]
fn dst_lowers_held_in_loss() {
    let tok = Tokenizer::char_level();
    let data = encode_all(&tok, &corpus(&["cooking", "music"], 12, 9)[..12]);
    let drops: Vec<f64> = (0..5)
        .map(|seed| {
            let mut m = TinyTransformer::new(config(1, 16, tok.vocab_size()), &mut rng(seed)).unwrap();
            m.attach_domain_adapters(8, &mut rng(seed + 100)).unwrap();
            let before = mean_sft_loss(&m, &data).unwrap();
            dst(&mut m, &data, 5, &Sgd { lr: 0.1, batch_size: 2 }, &mut rng(seed + 200)).unwrap();
            before - mean_sft_loss(&m, &data).unwrap()
        })
        .collect();
    assert!(median(drops) > 0.0);
}

#[test]
fn distill_edge_cases() {
    let tok = Tokenizer::char_level();
    let seqs: Vec<Vec<usize>> = encode_all(&tok, &corpus(&["travel", "cooking"], 4, 1))
        .iter()
        .map(EncodedSample::sequence)
        .collect();
    let llm = TinyTransformer::new(config(2, 16, tok.vocab_size()), &mut rng(1)).unwrap();

    let (dpm, report) = distill_init(&llm, config(1, 8, tok.vocab_size()), &seqs, 0, &Sgd::default(), &mut rng(2)).unwrap();
    assert_eq!(report.initial_loss, report.final_loss);
    let fresh = TinyTransformer::new(config(1, 8, tok.vocab_size()), &mut rng(2)).unwrap();
    assert!(block_eq(&dpm, &fresh, ParamKind::Base));

    let mut copy = llm.clone();
    let r = distill(&llm, &mut copy, &seqs, 0, &Sgd::default(), &mut rng(3)).unwrap();
    assert!(r.initial_loss.abs() < 1e-12);

    assert!(distill_init(&llm, config(1, 8, 50), &seqs, 1, &Sgd::default(), &mut rng(4)).is_err());
    assert!(distill_init(&llm, config(2, 8, tok.vocab_size()), &seqs, 1, &Sgd::default(), &mut rng(4)).is_err());
    assert!(distill_init(&llm, config(1, 8, tok.vocab_size()), &[], 1, &Sgd::default(), &mut rng(4)).is_err());
}

#[test]
fn distillation_halves_loss() {
    let tok = Tokenizer::char_level();
    let seqs: Vec<Vec<usize>> = encode_all(&tok, &corpus(&["travel", "cooking"], 20, 11))
        .iter()
        .map(EncodedSample::sequence)
        .collect();
    let ratios: Vec<f64> = (0..5)
        .map(|seed| {
            let mut llm = TinyTransformer::new(config(2, 24, tok.vocab_size()), &mut rng(seed)).unwrap();
            // a sharper teacher than random init, so there is something to match
            let data = encode_all(&tok, &corpus(&["travel", "cooking"], 20, 11));
            pretrain(&mut llm, &data, 2, &Sgd { lr: 0.1, batch_size: 4 }, &mut rng(seed + 1)).unwrap();
            let opt = Sgd { lr: 0.2, batch_size: 1 };
            let (_, r) = distill_init(&llm, config(1, 16, tok.vocab_size()), &seqs, 200, &opt, &mut rng(seed + 2)).unwrap();
            r.final_loss / r.initial_loss
        })
        .collect();
    let m = median(ratios.clone());
    assert!(m <= 0.5, "{ratios:?}");
}

struct Pair {
    proxy: TinyTransformer,
    peer: TinyTransformer,
    data: Vec<PairedSample>,
}

fn pair(seed: u64, same_tokenizer: bool) -> (Pair, Tokenizer, Tokenizer) {
    let samples = corpus(&["travel", "sports"], 5, seed);
    let proxy_tok = Tokenizer::char_level();
    let peer_tok = if same_tokenizer {
        Tokenizer::char_level()
    } else {
        let texts: Vec<String> = samples.iter().map(|s| format!("{}{}", s.prompt(), s.answer())).collect();
        train_bpe(&texts, 30).unwrap()
    };
    let mut proxy = TinyTransformer::new(config(1, 8, proxy_tok.vocab_size()), &mut rng(seed)).unwrap();
    let mut peer = TinyTransformer::new(config(1, 16, peer_tok.vocab_size()), &mut rng(seed + 1)).unwrap();
    proxy.attach_domain_adapters(4, &mut rng(seed + 2)).unwrap();
    proxy.attach_lora(&[LoraTarget::Wq, LoraTarget::Wv], 2, &mut rng(seed + 3)).unwrap();
    peer.attach_lora(&[LoraTarget::Wq, LoraTarget::Wv], 2, &mut rng(seed + 4)).unwrap();
    let data = pair_samples(&samples, &proxy_tok, &peer_tok).unwrap();
    (Pair { proxy, peer, data }, proxy_tok, peer_tok)
}

const W: SamlWeights = SamlWeights { alpha: 0.5, beta: 0.5, k: 4 };

#[test]
fn saml_zero_epochs_is_noop() {
    let (mut p, _, _) = pair(1, false);
    let (proxy0, peer0) = (p.proxy.clone(), p.peer.clone());
    let (block, _) = saml(&mut p.proxy, &mut p.peer, &p.data, &W, 0, &Sgd::default(), &mut rng(0)).unwrap();
    assert!(block.bitwise_eq(&proxy0.lora_block()));
    for kind in [ParamKind::Base, ParamKind::Lora, ParamKind::Adapter] {
        assert!(block_eq(&p.proxy, &proxy0, kind));
        assert!(block_eq(&p.peer, &peer0, kind));
    }
}

#[test]
fn saml_moves_only_lora() {
    let (mut p, _, _) = pair(2, false);
    let (proxy0, peer0) = (p.proxy.clone(), p.peer.clone());
    let flags = (p.proxy.trainable_flags(), p.peer.trainable_flags());
    let (block, report) = saml(&mut p.proxy, &mut p.peer, &p.data, &W, 2, &Sgd::default(), &mut rng(0)).unwrap();
    assert!(block.bitwise_eq(&p.proxy.lora_block()));
    assert_eq!(report.proxy_losses.len(), 2);
    for (now, before) in [(&p.proxy, &proxy0), (&p.peer, &peer0)] {
        assert!(block_eq(now, before, ParamKind::Base));
        assert!(block_eq(now, before, ParamKind::Adapter));
        assert!(!block_eq(now, before, ParamKind::Lora));
    }
    assert_eq!((p.proxy.trainable_flags(), p.peer.trainable_flags()), flags);
}

#[test]
fn saml_without_transfer_equals_independent_sft() {
    let (mut p, proxy_tok, peer_tok) = pair(3, false);
    let (mut proxy_sft, mut peer_sft) = (p.proxy.clone(), p.peer.clone());
    let w = SamlWeights { alpha: 0.0, beta: 0.0, k: 4 };
    let opt = Sgd { lr: 0.05, batch_size: 2 };
    saml(&mut p.proxy, &mut p.peer, &p.data, &w, 2, &opt, &mut rng(42)).unwrap();

    // same seed, so each independent run replays the joint run's shuffles
    let samples = corpus(&["travel", "sports"], 5, 3);
    let proxy_data = encode_all(&proxy_tok, &samples);
    let peer_data = encode_all(&peer_tok, &samples);
    lora_sft(&mut proxy_sft, &proxy_data, 2, &opt, &mut rng(42)).unwrap();
    lora_sft(&mut peer_sft, &peer_data, 2, &opt, &mut rng(42)).unwrap();
    assert!(p.proxy.lora_block().bitwise_eq(&proxy_sft.lora_block()));
    assert!(p.peer.lora_block().bitwise_eq(&peer_sft.lora_block()));
}

#[test]
fn shared_tokenizer_gives_identity_alignment() {
    let (p, proxy_tok, _) = pair(4, true);
    for s in &p.data {
        assert!(s.peer_to_proxy.is_identity());
        assert!(s.proxy_to_peer.is_identity());
        let logits = p.peer.forward(&s.peer.sequence()[..s.peer.sequence().len() - 1]).unwrap();
        let projected = project_logits(&logits, &s.peer_to_proxy).unwrap();
        assert!(projected.bitwise_eq(&logits));
        assert_eq!(s.proxy.input_tokens(&proxy_tok).unwrap()[0], "<bos>");
    }
}

#[test]
fn saml_requires_lora() {
    let (mut p, _, _) = pair(5, false);
    p.peer.detach_lora().unwrap();
    assert!(saml(&mut p.proxy, &mut p.peer, &p.data, &W, 1, &Sgd::default(), &mut rng(0)).is_err());
}

/// Both mixed objectives, with the other model's aligned logits held fixed,
/// against finite differences on 1-layer models.
#[test]
fn mixed_objective_gradients_match_finite_differences() {
    for seed in 0..3 {
        let (mut p, _, _) = pair(10 + seed, false);
        let mut r = rng(seed);
        for m in [&mut p.proxy, &mut p.peer] {
            for b in &mut m.blocks {
                for l in &mut b.lora {
                    l.b.value = Tensor::randn(l.b.value.shape(), 0.3, &mut r);
                }
            }
        }
        let s = p.data[0].clone();
        let (pi, pt) = p.proxy.sft_example(&s.proxy.prompt, &s.proxy.answer).unwrap();
        let (qi, qt) = p.peer.sft_example(&s.peer.prompt, &s.peer.answer).unwrap();
        let peer_aligned = project_logits(&p.peer.forward(&qi).unwrap(), &s.peer_to_proxy).unwrap();
        let proxy_aligned = project_logits(&p.proxy.forward(&pi).unwrap(), &s.proxy_to_peer).unwrap();

        let report = grad_check(
            &mut p.proxy,
            1e-5,
            |m| saml_loss_dpm(&m.forward(&pi)?, &peer_aligned, &pt, 0.5, 4),
            |m| {
                let pass = forward_pass(m, &s.proxy)?;
                finish_pass(m, pass, &peer_aligned, 0.5, 4)
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "proxy seed {seed}: {}", report.max_rel_error);
        assert_eq!(report.frozen_nonzero, 0);

        let report = grad_check(
            &mut p.peer,
            1e-5,
            |m| saml_loss_lm(&m.forward(&qi)?, &proxy_aligned, &qt, 0.5, 4),
            |m| {
                let pass = forward_pass(m, &s.peer)?;
                finish_pass(m, pass, &proxy_aligned, 0.5, 4)
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "peer seed {seed}: {}", report.max_rel_error);
    }
}
