use proptest::prelude::*;

use dwvit_core::cost::{flops_params, CostVariant};
use dwvit_core::dropin::{attn_conv_full, attn_dw, fold_full_kernel, init_params, replace_heads, replicate_channels, HybridModel, Variant};
use dwvit_core::select::{
    anneal_tau, check_properties, gumbel_topk_relax, hard_topk_gate, perturb, rank, relax_perturbed, select, sigma_head,
    HeadRef, SelectionMode, SelectionOrder, SelectionPlan, WelfordState,
};
use dwvit_core::tensor::{derive_seed, seeded_fill, Distribution, ShiftSet};
use dwvit_core::vit::{head_attention_with_energy, synthetic_inputs, BlockParams, Model, ModelConfig};
use dwvit_core::Tensor;

fn gauss(shape: &[usize], seed: u64) -> Tensor {
    seeded_fill(shape, seed, Distribution::Gaussian { mean: 0.0, std: 1.0 }).unwrap()
}

fn small_cfg(n_blocks: usize, n_heads: usize) -> ModelConfig {
    ModelConfig {
        n_blocks,
        n_heads,
        d_model: n_heads * 4,
        d_head: 4,
        grid: 4,
        kernel: 3,
        ffn_mult: 2,
        pre_norm: true,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn welford_matches_two_pass(
        stream in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 5), 2..60),
        offset in prop::sample::select(vec![0.0, 1e3, 1e6]),
    ) {
        let stream: Vec<Vec<f64>> = stream.into_iter().map(|s| s.into_iter().map(|v| v + offset).collect()).collect();
        let mut state = WelfordState::new(5);
        for s in &stream {
            state.update_f64(s).unwrap();
        }
        let n = stream.len() as f64;
        let sigma = state.finalize().unwrap();
        for j in 0..5 {
            let mean = stream.iter().map(|s| s[j]).sum::<f64>() / n;
            let std = (stream.iter().map(|s| (s[j] - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!((state.mean()[j] - mean).abs() <= 1e-10 * mean.abs().max(1.0));
            prop_assert!((sigma[j] - std).abs() <= 1e-10 * std.max(1e-3), "{} vs {}", sigma[j], std);
            prop_assert!(state.m2()[j] >= 0.0);
        }
    }

    #[test]
    fn zero_score_iff_identical_samples(seed in any::<u64>(), count in 2usize..8, perturb_at in prop::option::of(0usize..8)) {
        let base = gauss(&[4, 4], seed);
        let mut samples = vec![base.clone(); count];
        if let Some(at) = perturb_at.filter(|&a| a < count) {
            let mut d = base.data().to_vec();
            d[seed as usize % 16] += 0.5;
            samples[at] = Tensor::new(&[4, 4], d).unwrap();
        }
        let mut state = WelfordState::new(16);
        for s in &samples {
            state.update(s).unwrap();
        }
        let identical = samples.iter().all(|s| s.bitwise_eq(&samples[0]));
        prop_assert_eq!(sigma_head(&state.finalize().unwrap()) == 0.0, identical);
    }

    #[test]
    fn input_invariant_head_reports_ii(seed in any::<u64>(), count in 1usize..5) {
        let cfg = small_cfg(1, 2);
        let mut block = BlockParams::init(&cfg, seed).unwrap();
        block.w_q = Tensor::zeros(&[8, 8]);
        let energies: Vec<Tensor> = synthetic_inputs(&cfg, count, seed ^ 1)
            .unwrap()
            .iter()
            .map(|x| head_attention_with_energy(x, &block, 1).unwrap().1)
            .collect();
        let report = check_properties(&energies, cfg.grid, &ShiftSet::new(3).unwrap(), 0.0).unwrap();
        prop_assert!(report.input_invariance);
    }

    #[test]
    fn select_is_invariant_under_monotone_maps(
        scores in prop::collection::vec(-50.0f64..50.0, 1..12),
        budget_frac in 0.0f64..=1.0,
        highest in any::<bool>(),
    ) {
        let order = if highest { SelectionOrder::Highest } else { SelectionOrder::Lowest };
        let budget = (budget_frac * scores.len() as f64).round() as usize;
        let mapped: Vec<f64> = scores.iter().map(|s| (s / 10.0).exp() * 3.0 + 1.0).collect();
        let a = select(&scores, budget, SelectionMode::Blockwise, order, 2).unwrap();
        let b = select(&mapped, budget, SelectionMode::Blockwise, order, 2).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.blocks.len(), budget);
        prop_assert_eq!(a.heads.len(), 2 * budget);
    }

    #[test]
    fn hard_gate_matches_sort_oracle(w in prop::collection::vec(-5.0f64..5.0, 1..16), p_frac in 0.0f64..=1.0) {
        let p = (p_frac * w.len() as f64).round() as usize;
        let mask = hard_topk_gate(&w, p).unwrap();
        let mut idx: Vec<usize> = (0..w.len()).collect();
        idx.sort_by(|&a, &b| w[b].partial_cmp(&w[a]).unwrap().then(a.cmp(&b)));
        let mut oracle = vec![0.0; w.len()];
        for &i in &idx[..p] {
            oracle[i] = 1.0;
        }
        prop_assert_eq!(mask, oracle);
    }

    #[test]
    fn relaxed_weights_sum_to_budget(
        w in prop::collection::vec(-5.0f64..5.0, 1..16),
        p_frac in 0.0f64..=1.0,
        tau in 0.005f64..10.0,
        seed in any::<u64>(),
    ) {
        let p = (p_frac * w.len() as f64).round() as usize;
        let relaxed = gumbel_topk_relax(&w, p, tau, seed).unwrap();
        prop_assert!((relaxed.iter().sum::<f64>() - p as f64).abs() <= 1e-5);
        prop_assert!(relaxed.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert_eq!(relaxed, gumbel_topk_relax(&w, p, tau, seed).unwrap());
    }

    #[test]
    fn channel_shared_dw_equals_full_conv(seed in any::<u64>(), m in 3usize..7, d in 1usize..6, dh in 1usize..5) {
        let x = gauss(&[m, m, d], seed);
        let w = gauss(&[d, dh], seed ^ 2);
        let k = gauss(&[3, 3], seed ^ 3);
        let a = attn_dw(&x, &w, &replicate_channels(&k, dh).unwrap()).unwrap();
        let b = attn_conv_full(&x, &fold_full_kernel(&k, &w).unwrap()).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-5);
    }

    #[test]
    fn scattered_and_blockwise_plans_agree(seed in any::<u64>(), blocks in prop::sample::subsequence(vec![0usize, 1, 2], 0..=3), shuffle in any::<u64>()) {
        let cfg = small_cfg(3, 2);
        let model = HybridModel::from_model(Model::init(&cfg, seed).unwrap());
        let blockwise = SelectionPlan::from_blocks(&blocks, SelectionOrder::Lowest, cfg.n_heads);
        let mut heads: Vec<HeadRef> = blockwise.heads.clone();
        let shift = if heads.is_empty() { 0 } else { shuffle as usize % heads.len() };
        heads.rotate_left(shift);
        let scattered = SelectionPlan::from_heads(heads, SelectionOrder::Lowest);
        let a = replace_heads(&model, &blockwise, &init_params(&cfg, &blockwise, Variant::Dw, seed ^ 5, false).unwrap()).unwrap();
        let b = replace_heads(&model, &scattered, &init_params(&cfg, &scattered, Variant::Dw, seed ^ 5, false).unwrap()).unwrap();
        let x = &synthetic_inputs(&cfg, 1, seed ^ 6).unwrap()[0];
        prop_assert!(a.forward(x).unwrap().max_abs_diff(&b.forward(x).unwrap()).unwrap() <= 1e-6);
    }

    #[test]
    fn dw_is_cheaper_than_mhsa(n_heads in 1usize..32, d_head in 16usize..128, grid in 3usize..40) {
        let cfg = ModelConfig { n_blocks: 1, n_heads, d_model: n_heads * d_head, d_head, grid, kernel: 3, ffn_mult: 4, pre_norm: true };
        let dw = flops_params(CostVariant::DwAll, &cfg).unwrap();
        let mhsa = flops_params(CostVariant::Mhsa, &cfg).unwrap();
        prop_assert!(dw.flops < mhsa.flops);
        let full = flops_params(CostVariant::ConvFullAll, &cfg).unwrap();
        let k2 = 9u64;
        prop_assert_eq!(dw.params - full.params, k2 * cfg.d_model as u64 - n_heads as u64 * k2);
    }

    #[test]
    fn counters_do_not_overflow(d_head in 1usize..=128, n_heads in 1usize..=64, grid in 1usize..=100) {
        let cfg = ModelConfig { n_blocks: 1, n_heads, d_model: n_heads * d_head, d_head, grid, kernel: 1, ffn_mult: 4, pre_norm: true };
        prop_assume!(cfg.d_model <= 8192);
        for v in CostVariant::ALL {
            prop_assert!(flops_params(v, &cfg).is_ok());
        }
    }
}

#[test]
fn annealing_is_monotone_and_tightens_on_average() {
    let (tau0, tau_end, steps) = (4.0, 0.05, 12);
    let taus: Vec<f64> = (0..=steps).map(|t| anneal_tau(t, steps, tau0, tau_end).unwrap()).collect();
    assert!(taus.windows(2).all(|w| w[1] <= w[0]));

    // Mean L1 distance to the hard mask on the same perturbed logits, over
    // 200 seeds, at each point of the schedule.
    let w = [0.3, -1.2, 2.0, 0.0, 0.7, -0.4];
    let p = 2;
    let seeds = 200;
    let mut mean_l1 = vec![0.0; taus.len()];
    for s in 0..seeds {
        let z = perturb(&w, derive_seed(77, s));
        let hard = hard_topk_gate(&z, p).unwrap();
        for (i, &tau) in taus.iter().enumerate() {
            let relaxed = relax_perturbed(&z, p, tau).unwrap();
            mean_l1[i] += relaxed.iter().zip(&hard).map(|(a, b)| (a - b).abs()).sum::<f64>() / seeds as f64;
        }
    }
    assert!(mean_l1.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{mean_l1:?}");
    assert!(mean_l1.last().unwrap() < &0.1);
}

#[test]
fn scattered_plan_from_ranked_heads_is_valid() {
    let cfg = small_cfg(3, 2);
    let scores: Vec<f64> = (0..6).map(|i| (i * 7 % 5) as f64).collect();
    let plan = SelectionPlan::scattered(&scores, 3, SelectionOrder::Lowest, &cfg).unwrap();
    plan.validate(&cfg).unwrap();
    let ranked = rank(&scores, SelectionOrder::Lowest).unwrap();
    let expect: Vec<HeadRef> = ranked[..3].iter().map(|&i| HeadRef::new(i / 2, i % 2)).collect();
    assert_eq!(plan.heads, expect);
}
