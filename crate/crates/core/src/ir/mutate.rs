//! The six location-driven mutation operators.

use std::collections::{HashMap, VecDeque};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    generate_instructions, Builtin, Instruction, Opcode, Param, Program, StaticType, Var, BINARY_OPS, COMPARE_OPS,
    METHODS, PROPERTIES, UNARY_OPS,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MutationKind {
    InputMutator,
    InputMutatorTypeAware,
    OperationMutator,
    CombineMutator,
    CodeGenMutator,
    SpliceMutator,
}

impl MutationKind {
    pub const ALL: [MutationKind; 6] = [
        MutationKind::InputMutator,
        MutationKind::InputMutatorTypeAware,
        MutationKind::OperationMutator,
        MutationKind::CombineMutator,
        MutationKind::CodeGenMutator,
        MutationKind::SpliceMutator,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            MutationKind::InputMutator => "InputMutator",
            MutationKind::InputMutatorTypeAware => "InputMutatorTypeAware",
            MutationKind::OperationMutator => "OperationMutator",
            MutationKind::CombineMutator => "CombineMutator",
            MutationKind::CodeGenMutator => "CodeGenMutator",
            MutationKind::SpliceMutator => "SpliceMutator",
        }
    }

    pub fn from_name(name: &str) -> Option<MutationKind> {
        MutationKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

pub const DONOR_CAPACITY: usize = 128;
const SPLICE_MAX: usize = 6;
const COMBINE_MAX: usize = 16;

const MUTATED_INTS: [i64; 16] = [
    -1, 0, 1, 2, 3, 4, 8, 16, 64, 100, 255, 256, 1000, 1024, 65536, 2147483647,
];
#[allow(clippy::approx_constant)]
const MUTATED_FLOATS: [f64; 8] = [0.0, -0.0, 0.5, -1.5, 3.14, 1e10, 1e-5, 2.5];
const MUTATED_STRINGS: [&str; 8] = ["", "a", "foo", "length", "0", "x", "hello world", "42"];

/// Rolling window of recent valid programs used by splice and combine.
#[derive(Clone, Debug, Default)]
pub struct DonorPool {
    programs: VecDeque<Program>,
    capacity: usize,
}

impl DonorPool {
    pub fn new(capacity: usize) -> Self {
        DonorPool {
            programs: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn push(&mut self, program: Program) {
        if self.capacity == 0 {
            return;
        }
        if self.programs.len() == self.capacity {
            self.programs.pop_front();
        }
        self.programs.push_back(program);
    }

    pub fn len(&self) -> usize {
        self.programs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.programs.is_empty()
    }

    pub fn choose<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<&Program> {
        if self.programs.is_empty() {
            None
        } else {
            Some(&self.programs[rng.random_range(0..self.programs.len())])
        }
    }
}

/// Applies `kind` at every location, highest index first so that insertions
/// never shift a pending location. A location where the operator cannot act
/// leaves that instruction untouched and marks the result inapplicable, as
/// does a result longer than `max_len`.
pub fn apply_mutation<R: Rng + ?Sized>(
    program: &Program,
    kind: MutationKind,
    locations: &[usize],
    donors: &DonorPool,
    max_len: usize,
    rng: &mut R,
) -> Result<Program> {
    if let Some(&bad) = locations.iter().find(|&&l| l >= program.len()) {
        return Err(Error::Index {
            what: "program",
            index: bad,
            size: program.len(),
        });
    }
    let mut order = locations.to_vec();
    order.sort_unstable();
    order.dedup();
    let mut out = program.clone();
    for &loc in order.iter().rev() {
        let applied = match kind {
            MutationKind::InputMutator => swap_input(&mut out, loc, false, rng),
            MutationKind::InputMutatorTypeAware => swap_input(&mut out, loc, true, rng),
            MutationKind::OperationMutator => mutate_operation(&mut out.instructions[loc], rng),
            MutationKind::CodeGenMutator => {
                let count = rng.random_range(1..=3);
                let fresh = generate_instructions(rng, &out, loc + 1, count);
                insert(&mut out, loc + 1, fresh);
                true
            }
            MutationKind::SpliceMutator => match donors.choose(rng).and_then(|d| pick_slice(d, rng)) {
                Some(slice) => {
                    let renamed = rename(&slice, &mut out.next_var);
                    insert(&mut out, loc + 1, renamed);
                    true
                }
                None => false,
            },
            MutationKind::CombineMutator => match donors.choose(rng).and_then(|d| pick_prefix(d, rng)) {
                Some(prefix) => {
                    let renamed = rename(&prefix, &mut out.next_var);
                    insert(&mut out, loc + 1, renamed);
                    true
                }
                None => false,
            },
        };
        if !applied {
            out.inapplicable = true;
        }
    }
    if out.len() > max_len {
        out.inapplicable = true;
    }
    Ok(out)
}

fn insert(program: &mut Program, at: usize, fresh: Vec<Instruction>) {
    for ins in &fresh {
        if let Some(v) = ins.output {
            program.next_var = program.next_var.max(v + 1);
        }
    }
    program.instructions.splice(at..at, fresh);
}

fn swap_input<R: Rng + ?Sized>(program: &mut Program, loc: usize, typed: bool, rng: &mut R) -> bool {
    let ins = &program.instructions[loc];
    if ins.inputs.is_empty() {
        return false;
    }
    let slot = rng.random_range(0..ins.inputs.len());
    let current = ins.inputs[slot];
    let candidates: Vec<Var> = if typed {
        let types = program.static_types();
        let type_of = |v: &Var| types.get(v).copied().unwrap_or(StaticType::Unknown);
        let wanted = type_of(&current);
        let arithmetic = ins.opcode == Opcode::BinaryOperation && ins.param.text() != Some("+");
        let loop_bound = ins.opcode == Opcode::BeginForLoop;
        program.visible_vars()[loc]
            .iter()
            .copied()
            .filter(|v| *v != current)
            .filter(|v| {
                let t = type_of(v);
                if arithmetic {
                    t.is_numeric()
                } else if loop_bound {
                    t == StaticType::Int
                } else {
                    wanted == StaticType::Unknown || wanted.accepts(t)
                }
            })
            .collect()
    } else {
        program
            .defined_before(loc)
            .into_iter()
            .filter(|v| *v != current)
            .collect()
    };
    match candidates.choose(rng) {
        Some(&v) => {
            program.instructions[loc].inputs[slot] = v;
            true
        }
        None => false,
    }
}

fn other<'a, R: Rng + ?Sized>(choices: &[&'a str], current: &str, rng: &mut R) -> &'a str {
    let rest: Vec<&str> = choices.iter().copied().filter(|c| *c != current).collect();
    rest.choose(rng).copied().unwrap_or(choices[0])
}

fn mutate_operation<R: Rng + ?Sized>(ins: &mut Instruction, rng: &mut R) -> bool {
    let current = ins.param.text().unwrap_or("").to_owned();
    let next = match ins.opcode {
        Opcode::LoadInt => {
            let Param::Int(v) = ins.param else { return false };
            let fresh = if rng.random_bool(0.5) {
                let rest: Vec<i64> = MUTATED_INTS.iter().copied().filter(|c| *c != v).collect();
                *rest.choose(rng).expect("several constants")
            } else {
                let delta = rng.random_range(1..=4) * if rng.random_bool(0.5) { 1 } else { -1 };
                v.saturating_add(delta)
            };
            Param::Int(fresh)
        }
        Opcode::LoadFloat => {
            let Param::Float(v) = ins.param else { return false };
            let rest: Vec<f64> = MUTATED_FLOATS
                .iter()
                .copied()
                .filter(|c| c.to_bits() != v.to_bits())
                .collect();
            Param::Float(*rest.choose(rng).expect("several constants"))
        }
        Opcode::LoadString => Param::Text(other(&MUTATED_STRINGS, &current, rng).to_owned()),
        Opcode::LoadBuiltin => {
            let names: Vec<&str> = Builtin::ALL.iter().map(|b| b.name()).collect();
            Param::Text(other(&names, &current, rng).to_owned())
        }
        Opcode::GetProperty | Opcode::SetProperty => Param::Text(other(&PROPERTIES, &current, rng).to_owned()),
        Opcode::CallMethod => Param::Text(other(&METHODS, &current, rng).to_owned()),
        Opcode::BinaryOperation => Param::Text(other(&BINARY_OPS, &current, rng).to_owned()),
        Opcode::UnaryOperation => Param::Text(other(&UNARY_OPS, &current, rng).to_owned()),
        Opcode::Compare => Param::Text(other(&COMPARE_OPS, &current, rng).to_owned()),
        Opcode::Construct
        | Opcode::CreateArray
        | Opcode::CallFunction
        | Opcode::BeginForLoop
        | Opcode::EndForLoop
        | Opcode::BeginIf
        | Opcode::EndIf
        | Opcode::Return => return false,
    };
    ins.param = next;
    true
}

/// Whether `slice` opens and closes its own blocks and reads only variables
/// it defines itself.
fn self_contained(slice: &[Instruction]) -> bool {
    let mut depth = 0i32;
    let mut defined = std::collections::HashSet::new();
    for ins in slice {
        if ins.inputs.iter().any(|v| !defined.contains(v)) {
            return false;
        }
        match ins.opcode {
            Opcode::BeginForLoop | Opcode::BeginIf => depth += 1,
            Opcode::EndForLoop | Opcode::EndIf => {
                depth -= 1;
                if depth < 0 {
                    return false;
                }
            }
            _ => {}
        }
        defined.extend(ins.output);
    }
    depth == 0
}

fn pick_slice<R: Rng + ?Sized>(donor: &Program, rng: &mut R) -> Option<Vec<Instruction>> {
    let n = donor.len();
    let mut spans = Vec::new();
    for start in 0..n {
        for end in start + 1..=(start + SPLICE_MAX).min(n) {
            if self_contained(&donor.instructions[start..end]) {
                spans.push((start, end));
            }
        }
    }
    let &(s, e) = spans.choose(rng)?;
    Some(donor.instructions[s..e].to_vec())
}

fn pick_prefix<R: Rng + ?Sized>(donor: &Program, rng: &mut R) -> Option<Vec<Instruction>> {
    let ends: Vec<usize> = (1..=donor.len().min(COMBINE_MAX))
        .filter(|&p| self_contained(&donor.instructions[..p]))
        .collect();
    let &p = ends.choose(rng)?;
    Some(donor.instructions[..p].to_vec())
}

/// Gives every output a fresh number from `next_var` and rewrites reads of
/// those outputs accordingly.
fn rename(slice: &[Instruction], next_var: &mut Var) -> Vec<Instruction> {
    let mut map: HashMap<Var, Var> = HashMap::new();
    slice
        .iter()
        .map(|ins| {
            let mut copy = ins.clone();
            for v in &mut copy.inputs {
                if let Some(&m) = map.get(v) {
                    *v = m;
                }
            }
            if let Some(out) = ins.output {
                let fresh = *next_var;
                *next_var += 1;
                map.insert(out, fresh);
                copy.output = Some(fresh);
            }
            copy
        })
        .collect()
}
