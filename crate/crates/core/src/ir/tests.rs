use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::ArmFeatures;

fn p(text: &str) -> Program {
    Program::parse(text).unwrap()
}

fn site(op: Opcode, arm: usize) -> usize {
    branch_site(op, arm).unwrap()
}

fn valid_seed(rng: &mut ChaCha8Rng, size: usize) -> Program {
    loop {
        let prog = generate_seed(rng, size);
        if execute(&prog).outcome.is_valid() {
            return prog;
        }
    }
}

#[test]
fn smallest_seed_is_one_load() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let prog = generate_seed(&mut rng, 1);
    assert_eq!(prog.len(), 1);
    assert_eq!(prog.instructions[0].opcode, Opcode::LoadInt);
}

#[test]
fn seeds_are_well_formed_and_sized() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut valid = 0;
    for i in 0..1000 {
        let size = 1 + i % 40;
        let prog = generate_seed(&mut rng, size);
        assert_eq!(prog.len(), size);
        prog.validate().unwrap_or_else(|e| panic!("{e}\n{prog}"));
        let result = execute(&prog);
        assert_ne!(result.outcome, Outcome::SyntaxError);
        valid += usize::from(result.outcome.is_valid());
    }
    assert!(valid > 500, "{valid} valid seeds");
}

#[test]
fn seeds_are_reproducible() {
    let a = generate_seed(&mut ChaCha8Rng::seed_from_u64(9), 30);
    let b = generate_seed(&mut ChaCha8Rng::seed_from_u64(9), 30);
    assert_eq!(a, b);
}

#[test]
fn text_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..300 {
        let size = rng.random_range(1..40);
        let mut prog = generate_seed(&mut rng, size);
        prog.inapplicable = rng.random_bool(0.2);
        let text = prog.to_text();
        let back = Program::parse(&text).unwrap();
        assert_eq!(back, prog);
        assert_eq!(back.to_text(), text);
    }
    let odd = Program::new(vec![
        Instruction::new(
            Opcode::LoadString,
            vec![],
            Some(0),
            Param::Text("it's, a \\ test".into()),
        ),
        Instruction::new(Opcode::LoadFloat, vec![], Some(1), Param::Float(-0.0)),
        Instruction::new(Opcode::LoadFloat, vec![], Some(2), Param::Float(0.1 + 0.2)),
    ]);
    let back = Program::parse(&odd.to_text()).unwrap();
    assert_eq!(back, odd);
    let Param::Float(z) = back.instructions[1].param else {
        panic!()
    };
    assert!(z.is_sign_negative());
}

#[test]
fn listing_style_text_parses() {
    let prog = p("v0 <- LoadInt '256'\nv1 <- LoadInt '3'\nv2 <- BinaryOperation v0, v1, '+'\n");
    assert_eq!(prog.len(), 3);
    assert_eq!(prog.instructions[2].inputs, vec![0, 1]);
    assert_eq!(prog.instructions[2].param, Param::Text("+".into()));
    assert_eq!(prog.next_var, 3);
}

#[test]
fn parse_errors_name_the_line() {
    for (text, line) in [
        ("v0 <- LoadInt '1'\nv1 <- Frobnicate v0\n", 2),
        ("v0 <- LoadInt 'x'\n", 1),
        ("v0 <- LoadInt '1'\n\nv1 <- UnaryOperation v0, '-\n", 3),
        ("EndIf 'oops'\n", 1),
        ("v0 <- CreateArray v0,\n", 1),
    ] {
        match Program::parse(text) {
            Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text}"),
            other => panic!("{text}: {other:?}"),
        }
    }
}

#[test]
fn undefined_variable_is_a_reference_error() {
    let prog = p("v0 <- LoadInt '1'\nv2 <- BinaryOperation v0, v1, '+'\n");
    assert_eq!(execute(&prog).outcome, Outcome::ReferenceError);
    let scoped = p("v0 <- LoadInt '1'\nBeginIf v0\nv1 <- LoadInt '2'\nEndIf\nv2 <- UnaryOperation v1, '-'\n");
    assert_eq!(execute(&scoped).outcome, Outcome::ReferenceError);
}

#[test]
fn integer_addition_hits_one_site() {
    let prog = p("v0 <- LoadInt '1'\nv1 <- LoadInt '2'\nv2 <- BinaryOperation v0, v1, '+'\n");
    let r = execute(&prog);
    assert_eq!(r.outcome, Outcome::Valid);
    assert_eq!(r.branch_counts[site(Opcode::BinaryOperation, 0)], 1);
    assert_eq!(r.branch_counts.iter().sum::<u32>(), 3);
    assert_eq!(r.branch_counts.len(), BRANCH_SITES);
    assert_eq!(r.cc, 1);
}

#[test]
fn each_error_class_is_reachable() {
    let cases = [
        ("v0 <- LoadInt '1'\nv1 <- GetProperty v0, 'x'\n", Outcome::TypeError),
        (
            "v0 <- LoadString 'a'\nv1 <- LoadInt '1'\nv2 <- BinaryOperation v0, v1, '*'\n",
            Outcome::TypeError,
        ),
        (
            "v0 <- LoadInt '300'\nv1 <- BeginForLoop v0\nEndForLoop\n",
            Outcome::RangeError,
        ),
        (
            "v0 <- LoadInt '1'\nv1 <- LoadInt '0'\nv2 <- BinaryOperation v0, v1, '/'\n",
            Outcome::RangeError,
        ),
        ("v0 <- CreateArray\nv1 <- GetProperty v0, '3'\n", Outcome::RangeError),
        ("v0 <- LoadInt '1'\nBeginIf v0\n", Outcome::SyntaxError),
        ("v0 <- LoadInt '1'\nv0 <- LoadInt '2'\n", Outcome::SyntaxError),
        (
            "v0 <- LoadInt '1'\nv1 <- BinaryOperation v0, v0, '**'\n",
            Outcome::SyntaxError,
        ),
        ("v0 <- LoadBuiltin 'eval'\n", Outcome::ReferenceError),
        (
            "v0 <- LoadInt '9007199254740000'\nv1 <- BinaryOperation v0, v0, '*'\n",
            Outcome::RangeError,
        ),
    ];
    for (text, expected) in cases {
        assert_eq!(execute(&p(text)).outcome, expected, "{text}");
    }
}

#[test]
fn loops_and_conditionals_count_directions() {
    let prog = p("v0 <- LoadInt '3'\nv1 <- BeginForLoop v0\nBeginIf v1\nEndIf\nEndForLoop\n");
    let r = execute(&prog);
    assert_eq!(r.outcome, Outcome::Valid);
    assert_eq!(r.branch_counts[site(Opcode::BeginForLoop, 0)], 1);
    assert_eq!(r.branch_counts[site(Opcode::EndForLoop, 0)], 2);
    assert_eq!(r.branch_counts[site(Opcode::EndForLoop, 1)], 1);
    assert_eq!(r.branch_counts[site(Opcode::BeginIf, 0)], 2);
    assert_eq!(r.branch_counts[site(Opcode::BeginIf, 1)], 1);
    assert_eq!(r.cc, 3);

    let skipped = p("v0 <- LoadInt '0'\nv1 <- BeginForLoop v0\nv2 <- GetProperty v0, 'x'\nEndForLoop\n");
    let r = execute(&skipped);
    assert_eq!(r.outcome, Outcome::Valid);
    assert_eq!(r.branch_counts[site(Opcode::BeginForLoop, 1)], 1);
}

#[test]
fn nested_loops_exhaust_the_step_budget() {
    let prog = p("v0 <- LoadInt '256'\nv1 <- BeginForLoop v0\nv2 <- BeginForLoop v0\nEndForLoop\nEndForLoop\n");
    assert_eq!(execute(&prog).outcome, Outcome::RangeError);
}

#[test]
fn cyclomatic_complexity_counts_decisions() {
    use crate::reward::cyclomatic_complexity;
    assert_eq!(cyclomatic_complexity(&p("v0 <- LoadInt '1'\n")), 1);
    assert_eq!(
        cyclomatic_complexity(&p("v0 <- LoadInt '1'\nv1 <- BeginForLoop v0\nEndForLoop\n")),
        2
    );
    let nested =
        "v0 <- LoadInt '2'\nv1 <- BeginForLoop v0\nv2 <- BeginForLoop v0\nBeginIf v2\nEndIf\nEndForLoop\nEndForLoop\n";
    assert_eq!(cyclomatic_complexity(&p(nested)), 4);
    let loop_with_if = "v0 <- LoadInt '2'\nv1 <- BeginForLoop v0\nBeginIf v1\nEndIf\nEndForLoop\n";
    assert_eq!(cyclomatic_complexity(&p(loop_with_if)), 3);
}

#[test]
fn valid_straight_line_code_avoids_control_sites() {
    let control: Vec<usize> = [Opcode::BeginForLoop, Opcode::EndForLoop, Opcode::BeginIf, Opcode::EndIf]
        .into_iter()
        .flat_map(|op| (0..site_arms(op)).map(move |a| site(op, a)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    while checked < 200 {
        let prog = {
            let size = rng.random_range(1..30);
            generate_seed(&mut rng, size)
        };
        if prog.cyclomatic_complexity() > 1 {
            continue;
        }
        let r = execute(&prog);
        if r.outcome.is_valid() {
            assert!(control.iter().all(|&s| r.branch_counts[s] == 0));
            checked += 1;
        }
    }
}

#[test]
fn execution_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let prog = generate_seed(&mut rng, 25);
        assert_eq!(execute(&prog), execute(&prog));
    }
}

#[test]
fn input_mutation_of_a_literal_is_inapplicable() {
    let prog = p("v0 <- LoadInt '1'\nv1 <- LoadInt '2'\nv2 <- BinaryOperation v0, v1, '+'\n");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let out = apply_mutation(
        &prog,
        MutationKind::InputMutator,
        &[0],
        &DonorPool::new(4),
        64,
        &mut rng,
    )
    .unwrap();
    assert!(out.inapplicable);
    assert_eq!(out.instructions, prog.instructions);
    assert_eq!(execute(&out).outcome, Outcome::SyntaxError);
    assert!(out.to_text().starts_with("; inapplicable\n"));
}

#[test]
fn operation_mutation_changes_a_constant() {
    let prog = p("v0 <- LoadInt '256'\n");
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = apply_mutation(
            &prog,
            MutationKind::OperationMutator,
            &[0],
            &DonorPool::new(4),
            64,
            &mut rng,
        )
        .unwrap();
        assert!(!out.inapplicable);
        assert_eq!(out.instructions[0].opcode, Opcode::LoadInt);
        assert_ne!(out.instructions[0].param, Param::Int(256));
        if let Param::Int(v) = out.instructions[0].param {
            if v.abs() <= 1 << 53 {
                assert_eq!(execute(&out).outcome, Outcome::Valid);
            }
        }
    }
}

#[test]
fn operation_mutation_skips_structural_opcodes() {
    let prog = p("v0 <- LoadInt '2'\nv1 <- BeginForLoop v0\nEndForLoop\nv2 <- CreateArray v0\n");
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for loc in [1, 2, 3] {
        let out = apply_mutation(
            &prog,
            MutationKind::OperationMutator,
            &[loc],
            &DonorPool::new(1),
            64,
            &mut rng,
        )
        .unwrap();
        assert!(out.inapplicable, "location {loc}");
    }
}

#[test]
fn out_of_range_location_is_an_error() {
    let prog = p("v0 <- LoadInt '2'\n");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let err = apply_mutation(
        &prog,
        MutationKind::CodeGenMutator,
        &[1],
        &DonorPool::new(1),
        64,
        &mut rng,
    );
    assert!(matches!(err, Err(Error::Index { index: 1, .. })));
}

#[test]
fn type_aware_swaps_keep_strings_out_of_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let donors = DonorPool::new(1);
    let mut trials = 0;
    let mut violations = 0;
    while trials < 10_000 {
        let prog = {
            let size = rng.random_range(8..40);
            generate_seed(&mut rng, size)
        };
        let arithmetic: Vec<usize> = prog
            .instructions
            .iter()
            .enumerate()
            .filter(|(_, i)| i.opcode == Opcode::BinaryOperation && i.param.text() != Some("+"))
            .map(|(pc, _)| pc)
            .collect();
        if arithmetic.is_empty() {
            continue;
        }
        let types = prog.static_types();
        let loc = arithmetic[rng.random_range(0..arithmetic.len())];
        let out = apply_mutation(
            &prog,
            MutationKind::InputMutatorTypeAware,
            &[loc],
            &donors,
            64,
            &mut rng,
        )
        .unwrap();
        for v in &out.instructions[loc].inputs {
            if types.get(v) == Some(&StaticType::Str) {
                violations += 1;
            }
        }
        trials += 1;
    }
    assert_eq!(violations, 0);
}

fn type_errors(kind: MutationKind, seed: u64, trials: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let donors = DonorPool::new(1);
    let mut errors = 0;
    for _ in 0..trials {
        let prog = {
            let size = rng.random_range(6..30);
            valid_seed(&mut rng, size)
        };
        let with_inputs: Vec<usize> = (0..prog.len())
            .filter(|&i| !prog.instructions[i].inputs.is_empty())
            .collect();
        if with_inputs.is_empty() {
            continue;
        }
        let loc = with_inputs[rng.random_range(0..with_inputs.len())];
        let mut mrng = ChaCha8Rng::seed_from_u64(rng.random());
        let out = apply_mutation(&prog, kind, &[loc], &donors, 64, &mut mrng).unwrap();
        errors += usize::from(execute(&out).outcome == Outcome::TypeError);
    }
    errors
}

#[test]
fn type_aware_swaps_cause_fewer_type_errors() {
    let mut gaps: Vec<i64> = (0..5)
        .map(|seed| {
            let plain = type_errors(MutationKind::InputMutator, 100 + seed, 10_000) as i64;
            let typed = type_errors(MutationKind::InputMutatorTypeAware, 100 + seed, 10_000) as i64;
            plain - typed
        })
        .collect();
    gaps.sort_unstable();
    assert!(gaps[2] > 0, "{gaps:?}");
}

#[test]
fn donor_mutations_need_donors_and_rename_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let prog = valid_seed(&mut rng, 12);
    let empty = DonorPool::new(4);
    for kind in [MutationKind::SpliceMutator, MutationKind::CombineMutator] {
        let out = apply_mutation(&prog, kind, &[0, 5], &empty, 64, &mut rng).unwrap();
        assert!(out.inapplicable);
    }
    let mut donors = DonorPool::new(4);
    for _ in 0..6 {
        donors.push(valid_seed(&mut rng, 15));
    }
    assert_eq!(donors.len(), 4);
    for kind in [
        MutationKind::SpliceMutator,
        MutationKind::CombineMutator,
        MutationKind::CodeGenMutator,
    ] {
        for _ in 0..50 {
            let out = apply_mutation(&prog, kind, &[2, 7], &donors, 64, &mut rng).unwrap();
            assert!(!out.inapplicable, "{kind:?}");
            assert!(out.len() > prog.len());
            out.validate().unwrap_or_else(|e| panic!("{kind:?}: {e}\n{out}"));
        }
    }
}

#[test]
fn growth_past_the_length_cap_is_inapplicable() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let prog = valid_seed(&mut rng, 10);
    let out = apply_mutation(
        &prog,
        MutationKind::CodeGenMutator,
        &[0, 1, 2, 3],
        &DonorPool::new(1),
        11,
        &mut rng,
    )
    .unwrap();
    assert!(out.inapplicable);
}

#[test]
fn mutated_programs_always_execute() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut donors = DonorPool::new(DONOR_CAPACITY);
    let mut prog = generate_seed(&mut rng, 10);
    for _ in 0..10_000 {
        let kind = MutationKind::ALL[rng.random_range(0..6)];
        let n = rng.random_range(1..=prog.len().min(7));
        let locs = rand::seq::index::sample(&mut rng, prog.len(), n).into_vec();
        let out = apply_mutation(&prog, kind, &locs, &donors, DEFAULT_MAX_LEN, &mut rng).unwrap();
        let r = execute(&out);
        assert!(Outcome::ALL.contains(&r.outcome));
        if r.outcome.is_valid() {
            donors.push(out.clone());
        }
        prog = if out.inapplicable || out.len() > 40 || rng.random_bool(0.1) {
            {
                let size = rng.random_range(1..30);
                generate_seed(&mut rng, size)
            }
        } else {
            out
        };
    }
}

#[test]
fn tokens_follow_opcodes() {
    let prog = p("v0 <- LoadInt '1'\nv1 <- LoadInt '2'\n");
    let a = tokenize(&prog, MutationKind::InputMutator, 7).unwrap();
    let b = tokenize(&prog, MutationKind::SpliceMutator, 7).unwrap();
    let (ArmFeatures::Tokens { mutation: ma, ids: ia }, ArmFeatures::Tokens { mutation: mb, ids: ib }) =
        (&a.features, &b.features)
    else {
        panic!("token rounds expected");
    };
    assert_eq!(ia, &vec![0, 0]);
    assert_eq!(ia, ib);
    assert_ne!(ma, mb);
    assert_eq!(a.n_select, 2);
    assert_eq!(VOCAB_SIZE, 25);
    assert_eq!(START_TOKEN, 24);
    assert_eq!(a.features.sequence_ids().len(), prog.len() + 1);
}

#[test]
fn site_layout_is_fixed() {
    assert_eq!(BRANCH_SITES, 104);
    let mut seen = std::collections::HashSet::new();
    for op in Opcode::ALL {
        for arm in 0..site_arms(op) {
            assert!(seen.insert(site(op, arm)));
        }
        assert!(branch_site(op, site_arms(op)).is_none());
    }
    assert_eq!(seen.len(), BRANCH_SITES);
}
