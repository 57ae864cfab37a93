mod common;

use std::sync::OnceLock;

use common::oracle;
use failforge_core::augment::{augment_corpus, reverse_episode};
use failforge_core::cot::{build_cot_prompt, grounding_for, CotTemplates};
use failforge_core::edits::classify_instruction_change;
use failforge_core::episode::validate_episode;
use failforge_core::eval::confusion_matrix;
use failforge_core::exec_perturb::{
    emit_sim_directive, perturb_real, perturb_revert_action, preposition_swap, DirectiveConfig, RealMode, SimDirective,
};
use failforge_core::gateway::{compose_grid, GridCell};
use failforge_core::guard::{run_guarded_step, RetryPolicy, RetryTarget};
use failforge_core::plan_perturb::{perturb_plan, PlanMode};
use failforge_core::protocol::parse_verdict;
use failforge_core::{Category, Episode, Kind, Lexicon, Sample, Source, Verdict};
use image::RgbaImage;
use proptest::prelude::*;

fn corpus() -> &'static [Episode] {
    static C: OnceLock<Vec<Episode>> = OnceLock::new();
    C.get_or_init(common::corpus)
}

fn lex() -> &'static Lexicon {
    static L: OnceLock<Lexicon> = OnceLock::new();
    L.get_or_init(Lexicon::seed)
}

#[test]
fn fixture_corpus_is_clean() {
    for ep in corpus() {
        let report = validate_episode(ep, &common::corpus_root());
        assert!(report.errors.is_empty(), "{}: {:?}", ep.episode_id, report.errors);
        assert!(report.warnings.is_empty(), "{}: {:?}", ep.episode_id, report.warnings);
    }
}

#[test]
fn manifest_round_trip_is_identity() {
    for ep in corpus() {
        let back = Episode::from_json_str(&ep.to_json_string(), &ep.episode_id).unwrap();
        assert_eq!(&back, ep);
    }
}

#[test]
fn reversal_adds_exactly_the_reversible_fraction() {
    // Hand count: real-001 (open), real-002 (upright) and real-005 (close)
    // are the only real episodes whose every step carries an antonym.
    let augmented = augment_corpus(corpus(), lex());
    assert_eq!(augmented.len(), corpus().len() + 3);
    let reversed: Vec<&str> = augmented
        .iter()
        .filter(|e| e.episode_id.ends_with("-rev"))
        .map(|e| e.episode_id.as_str())
        .collect();
    assert_eq!(reversed, ["real-001-rev", "real-002-rev", "real-005-rev"]);
    for ep in corpus() {
        if let Some(rev) = reverse_episode(ep, lex()) {
            let back = reverse_episode(&rev, lex()).unwrap();
            assert_eq!(back.plan(), ep.plan());
            for (a, b) in back.plan_steps.iter().zip(&ep.plan_steps) {
                assert_eq!(a.start_frames, b.start_frames);
                assert_eq!(a.end_frames, b.end_frames);
            }
        }
    }
}

#[test]
fn verdict_round_trip_is_exhaustive() {
    for kind in Kind::ALL {
        for &c in kind.categories() {
            let v = Verdict::from_category(c, Some("I looked at the images.".into()));
            let parsed = parse_verdict(&v.to_text(), kind).unwrap();
            assert_eq!((parsed.success, parsed.category), (v.success, v.category));
            assert_eq!(parsed.reasoning, v.reasoning);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn plan_perturbations_hold_structure(ep_idx in 0usize..10, mode_idx in 0usize..5, seed in any::<u64>()) {
        let ep = &corpus()[ep_idx];
        let mode = PlanMode::ALL[mode_idx];
        let orig = ep.plan();
        match perturb_plan(ep, mode, seed, lex(), None) {
            Err(e) => prop_assert!(e.is_not_applicable(), "{e}"),
            Ok(s) => {
                prop_assert_ne!(s.plan.join("\n"), orig.join("\n"));
                prop_assert_eq!(s.label.category(), mode.category());
                let check = match mode {
                    PlanMode::WrongOrder => oracle::check_wrong_order(&orig, &s.plan),
                    PlanMode::MissingSubtask => oracle::check_missing(&orig, &s.plan),
                    PlanMode::ContradictorySubtasks => oracle::check_contradictory(&orig, &s.plan, lex()),
                    _ => oracle::check_single_step_change(&orig, &s.plan),
                };
                prop_assert!(check.is_ok(), "{:?}: {:?}", mode, check);
                let again = perturb_plan(ep, mode, seed, lex(), None).unwrap();
                prop_assert_eq!(s, again);
            }
        }
    }

    #[test]
    fn real_perturbations_only_touch_text_or_pairing(ep_idx in 0usize..10, seed in any::<u64>(), semantic in any::<bool>()) {
        let ep = &corpus()[ep_idx];
        let mode = if semantic { RealMode::SemanticMismatch } else { RealMode::RevertAction };
        match perturb_real(ep, mode, seed, lex(), None) {
            Err(e) => prop_assert!(e.is_not_applicable()),
            Ok(s) => {
                prop_assert_eq!(ep.source, Source::Real);
                let step = ep.plan_steps.iter().find(|p| p.start_frames == s.start_images).unwrap();
                if semantic {
                    prop_assert_eq!(&s.end_images, &step.end_frames);
                    prop_assert_ne!(&s.subtask_instruction, &step.instruction);
                    let objects = ep.object_names();
                    let expected = classify_instruction_change(
                        &step.instruction, &s.subtask_instruction, &objects, step.target_place.as_deref(), lex());
                    prop_assert_eq!(Some(s.label.category()), expected);
                } else {
                    prop_assert_eq!(&s.end_images, &s.start_images);
                    prop_assert_eq!(&s.subtask_instruction, &step.instruction);
                    prop_assert_eq!(s.label.category(), Category::NoProgress);
                }
            }
        }
    }

    #[test]
    fn revert_on_any_real_step(ep_idx in 0usize..6, step in 0usize..4, seed in any::<u64>()) {
        let ep = &corpus()[ep_idx];
        if step < ep.len() {
            let s = perturb_revert_action(ep, step, seed).unwrap();
            prop_assert_eq!(s.end_images, s.start_images);
        }
    }

    #[test]
    fn preposition_swap_changes_one_preposition(ep_idx in 0usize..10, step in 0usize..4, seed in any::<u64>()) {
        let ep = &corpus()[ep_idx];
        if let Some(p) = ep.plan_steps.get(step) {
            if let Ok(out) = preposition_swap(&p.instruction, lex(), seed) {
                let check = oracle::check_preposition_swap(&p.instruction, &out, lex());
                prop_assert!(check.is_ok(), "{:?}", check);
            }
        }
    }

    #[test]
    fn directives_round_trip(ep_idx in 6usize..10, seed in any::<u64>()) {
        let d = emit_sim_directive(&corpus()[ep_idx], seed, &DirectiveConfig::default()).unwrap();
        let back = SimDirective::from_json_line(&d.to_json_line()).unwrap();
        prop_assert_eq!(back.to_json_line(), d.to_json_line());
        if let Some(o) = d.params.offset_mm {
            for v in o {
                prop_assert!((15.0..=40.0).contains(&v.abs()));
            }
        }
    }

    #[test]
    fn verdict_parser_never_panics(text in ".{0,200}") {
        for kind in Kind::ALL {
            let _ = parse_verdict(&text, kind);
        }
    }

    #[test]
    fn verdict_parser_survives_answer_like_noise(
        head in "(?i)answer: ?(success|failure)",
        tail in "( ?\\| ?CATEGORY: ?[a-z_]{0,30})?",
        pre in "[ -~\n]{0,40}",
    ) {
        let text = format!("{pre}\n{head}{tail}");
        for kind in Kind::ALL {
            if let Ok(v) = parse_verdict(&text, kind) {
                prop_assert!(v.category.is_valid_for(kind));
                prop_assert_eq!(v.success, v.category == Category::Success);
            }
        }
    }

    #[test]
    fn grid_cells_are_lossless(views in 1usize..5, w in 1u32..12, h in 1u32..12, seed in any::<u64>()) {
        let mut cells = Vec::new();
        for v in 0..views {
            for t in 0..2u32 {
                let img = RgbaImage::from_fn(w, h, |x, y| {
                    let b = (seed ^ (v as u64 * 131 + t as u64 * 17 + x as u64 * 7 + y as u64)) as u8;
                    image::Rgba([b, b.wrapping_mul(3), b.wrapping_add(v as u8), 255])
                });
                cells.push(GridCell { view_id: format!("v{v}"), timestep: t, image: img });
            }
        }
        let grid = compose_grid(&cells, views, 2).unwrap();
        prop_assert_eq!(grid.dimensions(), (2 * w, views as u32 * h));
        for c in &cells {
            let row: u32 = c.view_id[1..].parse().unwrap();
            let cut = image::imageops::crop_imm(&grid, c.timestep * w, row * h, w, h).to_image();
            prop_assert_eq!(cut.as_raw(), c.image.as_raw());
        }
    }

    #[test]
    fn confusion_rows_match_support(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..300)) {
        let classes = ["a", "b", "c", "d"];
        let golds: Vec<&str> = pairs.iter().map(|p| classes[p.0]).collect();
        let preds: Vec<&str> = pairs.iter().map(|p| classes[p.1]).collect();
        let m = confusion_matrix(&golds, &preds, &classes).unwrap();
        for (i, c) in classes.iter().enumerate() {
            let support = golds.iter().filter(|g| *g == c).count() as u64;
            prop_assert_eq!(m.counts[i].iter().sum::<u64>(), support);
            let total: f64 = m.row_normalized[i].iter().sum();
            if support > 0 {
                prop_assert!((total - 100.0).abs() <= 0.01);
            } else {
                prop_assert!(m.empty_rows.contains(&c.to_string()));
            }
        }
    }

    #[test]
    fn guarded_loop_is_bounded(script in proptest::collection::vec(any::<bool>(), 1..8), max_retries in 0u32..6) {
        let policy = RetryPolicy { max_retries, retry_target: RetryTarget::Reexecute };
        let mut runs = 0u32;
        let out = run_guarded_step(
            |_| { runs += 1; Ok::<_, std::io::Error>(()) },
            |i, _| Ok(Verdict::from_category(
                if *script.get(i as usize).unwrap_or(&false) { Category::Success } else { Category::NoProgress },
                None,
            )),
            &policy,
        ).unwrap();
        prop_assert!(runs <= max_retries + 1);
        prop_assert_eq!(runs, out.attempts);
        let first_success = script.iter().position(|&s| s).map(|p| p as u32);
        let expected = match first_success {
            Some(p) if p <= max_retries => p + 1,
            _ => max_retries + 1,
        };
        prop_assert_eq!(out.attempts, expected);
    }

    #[test]
    fn cot_prompts_are_pure(ep_idx in 0usize..10, mode_idx in 0usize..5, seed in any::<u64>()) {
        let ep = &corpus()[ep_idx];
        if let Ok(s) = perturb_plan(ep, PlanMode::ALL[mode_idx], seed, lex(), None) {
            let sample = Sample::Planning(s);
            let t = CotTemplates::default();
            let g = grounding_for(&sample, ep);
            prop_assert!(!g.failure_reason.is_empty());
            let a = build_cot_prompt(&sample, &g, &t).unwrap();
            let b = build_cot_prompt(&sample, &grounding_for(&sample, ep), &t).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
