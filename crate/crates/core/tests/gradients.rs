//! Central finite differences against the analytic parameter gradients.

mod common;

use rand::Rng;
use refseg_core::image::{ClassProbMap, LabelMask};
use refseg_core::segmenter::{
    simulated_prob_map, stage1_loss_and_grad, SegmenterConfig, SegmenterState, SpatialPrompt, Stage1Example,
    TemplateInput,
};
use refseg_core::ssl::{
    supervised_batch_grad, teacher_label_from_probs, unlabeled_batch_grad, AssistantLabel, PseudoLabelPair,
    SSLConfig, ScheduleWeights, StudentNet, UnlabeledItem,
};

const H: f64 = 1e-4;
const MAX_REL: f64 = 1e-3;
const FLOOR: f64 = 1e-6;

fn small_segmenter(use_prompt: bool, use_memory: bool) -> SegmenterConfig {
    SegmenterConfig {
        feature_channels: 8,
        prompt_dim: 6,
        heads: 2,
        use_prompt,
        use_memory,
        ..SegmenterConfig::default()
    }
}

fn perturb_zero_init(state: &mut SegmenterState, seed: u64) {
    // The attention output map starts at zero, which hides the query/key
    // path from the check; give it small random values.
    let mut r = common::rng(seed);
    let wo = state.attention_output_param();
    for v in state.params.get_mut(wo).data.iter_mut() {
        *v = r.random_range(-0.2..0.2);
    }
}

fn check_stage1(use_prompt: bool, use_memory: bool, seed: u64) {
    let cfg = small_segmenter(use_prompt, use_memory);
    let mut state = SegmenterState::init(&cfg, seed).unwrap();
    perturb_zero_init(&mut state, seed);
    let mut r = common::rng(seed);
    let img = common::random_image(&mut r, 16, 16);
    let target = common::random_mask(&mut r, 16, 16, 2);
    let t_img = common::random_image(&mut r, 16, 16);
    let t_mask = common::random_mask(&mut r, 16, 16, 2);
    let spatial = SpatialPrompt::ProbMap(simulated_prob_map(&target.binary(1), 16, 16, seed));
    let ex = Stage1Example {
        image: &img,
        target: &target,
        class_id: 1,
        template: use_memory.then_some(TemplateInput { image: &t_img, mask: &t_mask }),
        spatial,
    };
    let (_, grads) = stage1_loss_and_grad(&state, &cfg, &ex).unwrap();
    let picks = common::random_picks(&mut r, &state.params, 30);
    let worst = common::fd_check(&state.params, &grads, &picks, H, FLOOR, |ps| {
        let s = SegmenterState::from_params(&cfg, ps.clone()).unwrap();
        stage1_loss_and_grad(&s, &cfg, &ex).unwrap().0.total
    });
    assert!(worst < MAX_REL, "prompt={use_prompt} memory={use_memory}: worst relative error {worst:e}");
}

#[test]
fn stage1_full_model() {
    check_stage1(true, true, 11);
}

#[test]
fn stage1_ablated_models() {
    check_stage1(false, true, 12);
    check_stage1(true, false, 13);
}

fn stage2_fixture(seed: u64) -> (SSLConfig, StudentNet, Vec<(refseg_core::image::GrayImage, LabelMask)>, Vec<UnlabeledItem>) {
    let cfg = SSLConfig {
        feature_channels: 8,
        ..SSLConfig::default()
    };
    let net = StudentNet::init(&cfg, seed).unwrap();
    let mut r = common::rng(seed);
    let labeled = (0..2)
        .map(|_| (common::random_image(&mut r, 16, 16), common::random_mask(&mut r, 16, 16, 2)))
        .collect();
    let items = (0..2)
        .map(|_| {
            let teacher = ClassProbMap::new(3, 16, 16, common::random_probs(&mut r, 3, 256)).unwrap();
            let assistant = ClassProbMap::new(3, 16, 16, common::random_probs(&mut r, 3, 256)).unwrap();
            UnlabeledItem {
                strong1: common::random_image(&mut r, 16, 16),
                strong2: common::random_image(&mut r, 16, 16),
                dropout_seed: r.random(),
                pair: PseudoLabelPair {
                    teacher: teacher_label_from_probs(teacher, 0.9),
                    assistant: Some(AssistantLabel { labels: assistant.to_mask(), probs: assistant }),
                },
            }
        })
        .collect();
    (cfg, net, labeled, items)
}

#[test]
fn stage2_objective() {
    let (cfg, net, labeled, items) = stage2_fixture(21);
    let w = ScheduleWeights { alpha_t: 0.4, alpha_v: 0.6 };
    let objective = |n: &StudentNet| {
        let (ls, mut g) = supervised_batch_grad(n, &labeled, &cfg).unwrap();
        let (lu, gu) = unlabeled_batch_grad(n, &items, w).unwrap();
        g.accumulate(&gu, cfg.lambda_u);
        (ls + cfg.lambda_u * lu.total, g)
    };
    let (_, grads) = objective(&net);
    let mut r = common::rng(22);
    let picks = common::random_picks(&mut r, &net.params, 30);
    let worst = common::fd_check(&net.params, &grads, &picks, H, FLOOR, |ps| {
        objective(&StudentNet::from_params(&cfg, ps.clone()).unwrap()).0
    });
    assert!(worst < MAX_REL, "worst relative error {worst:e}");
}

#[test]
fn stage2_supervised_only() {
    let (cfg, net, labeled, _) = stage2_fixture(31);
    let (_, grads) = supervised_batch_grad(&net, &labeled, &cfg).unwrap();
    let mut r = common::rng(32);
    let picks = common::random_picks(&mut r, &net.params, 25);
    let worst = common::fd_check(&net.params, &grads, &picks, H, FLOOR, |ps| {
        supervised_batch_grad(&StudentNet::from_params(&cfg, ps.clone()).unwrap(), &labeled, &cfg)
            .unwrap()
            .0
    });
    assert!(worst < MAX_REL, "worst relative error {worst:e}");
}
