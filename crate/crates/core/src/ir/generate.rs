//! Type-directed random program generation.

use std::collections::HashMap;

use rand::seq::IndexedRandom;
use rand::Rng;

use super::{infer_output, Builtin, Instruction, Opcode, Param, Program, StaticType, Var, BINARY_OPS, COMPARE_OPS};

const INTS: [i64; 16] = [0, 1, 2, 3, 4, 5, 7, 8, 10, 16, 42, 100, 255, 256, -1, -7];
const FLOATS: [f64; 6] = [0.5, 1.5, -2.25, 3.75, 10.0, 0.1];
const STRINGS: [&str; 7] = ["", "a", "foo", "bar", "length", "42", "hello"];
const FIELDS: [&str; 3] = ["x", "y", "name"];
const MAX_LOOP_DEPTH: usize = 2;

#[derive(Clone, Copy)]
struct Slot {
    var: Var,
    ty: StaticType,
    builtin: Option<Builtin>,
}

struct Ctx {
    visible: Vec<Slot>,
    next: Var,
}

impl Ctx {
    fn pick<R: Rng + ?Sized>(&self, rng: &mut R, pred: impl Fn(&Slot) -> bool) -> Option<Slot> {
        let matching: Vec<&Slot> = self.visible.iter().filter(|s| pred(s)).collect();
        matching.choose(rng).map(|s| **s)
    }

    fn emit(&mut self, opcode: Opcode, inputs: Vec<Slot>, param: Param) -> Instruction {
        let callee = inputs.first().and_then(|s| s.builtin);
        let types: Vec<StaticType> = inputs.iter().map(|s| s.ty).collect();
        let vars = inputs.iter().map(|s| s.var).collect();
        let mut ins = Instruction::new(opcode, vars, None, param);
        if opcode.has_output() {
            let out = self.next;
            self.next += 1;
            ins.output = Some(out);
            let ty = infer_output(&ins, &types, callee);
            let builtin = match (&ins.opcode, &ins.param) {
                (Opcode::LoadBuiltin, Param::Text(name)) => Builtin::from_name(name),
                _ => None,
            };
            self.visible.push(Slot { var: out, ty, builtin });
        }
        ins
    }

    fn load_int<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Instruction {
        self.emit(
            Opcode::LoadInt,
            vec![],
            Param::Int(*INTS.choose(rng).expect("nonempty")),
        )
    }

    fn primitive(s: &Slot) -> bool {
        matches!(
            s.ty,
            StaticType::Int | StaticType::Float | StaticType::Str | StaticType::Bool
        )
    }

    /// One straight-line instruction whose operands are plausible for its
    /// handler. Falls back to a literal load when nothing else applies.
    fn plain<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Instruction {
        let text = |s: &str| Param::Text(s.to_owned());
        for _ in 0..24 {
            match rng.random_range(0..15) {
                0 => return self.load_int(rng),
                1 => {
                    return self.emit(
                        Opcode::LoadFloat,
                        vec![],
                        Param::Float(*FLOATS.choose(rng).expect("nonempty")),
                    )
                }
                2 => return self.emit(Opcode::LoadString, vec![], text(STRINGS.choose(rng).expect("nonempty"))),
                3 => {
                    let b = *Builtin::ALL.choose(rng).expect("nonempty");
                    return self.emit(Opcode::LoadBuiltin, vec![], text(b.name()));
                }
                4 => {
                    let (Some(a), Some(b)) = (
                        self.pick(rng, |s| s.ty.is_numeric()),
                        self.pick(rng, |s| s.ty.is_numeric()),
                    ) else {
                        continue;
                    };
                    let op = BINARY_OPS.choose(rng).expect("nonempty");
                    return self.emit(Opcode::BinaryOperation, vec![a, b], text(op));
                }
                5 => {
                    let (Some(a), Some(b)) = (
                        self.pick(rng, |s| s.ty == StaticType::Str),
                        self.pick(rng, Self::primitive),
                    ) else {
                        continue;
                    };
                    let pair = if rng.random_bool(0.5) { vec![a, b] } else { vec![b, a] };
                    return self.emit(Opcode::BinaryOperation, pair, text("+"));
                }
                6 => {
                    let Some(a) = self.pick(rng, |_| true) else { continue };
                    let op = if a.ty.is_numeric() || a.ty == StaticType::Bool {
                        *["-", "~", "++", "!", "typeof"].choose(rng).expect("nonempty")
                    } else {
                        *["!", "typeof"].choose(rng).expect("nonempty")
                    };
                    return self.emit(Opcode::UnaryOperation, vec![a], text(op));
                }
                7 => {
                    let Some(a) = self.pick(rng, |_| true) else { continue };
                    let b = self.pick(rng, |s| a.ty.accepts(s.ty)).expect("a itself qualifies");
                    let op = COMPARE_OPS.choose(rng).expect("nonempty");
                    return self.emit(Opcode::Compare, vec![a, b], text(op));
                }
                8 => {
                    let n = rng.random_range(0..=3).min(self.visible.len());
                    let items = (0..n).filter_map(|_| self.pick(rng, |_| true)).collect();
                    return self.emit(Opcode::CreateArray, items, Param::None);
                }
                9 => {
                    let Some(o) = self.pick(rng, |s| {
                        matches!(
                            s.ty,
                            StaticType::Array | StaticType::Str | StaticType::Object | StaticType::Function
                        )
                    }) else {
                        continue;
                    };
                    let name = match o.ty {
                        StaticType::Object => FIELDS.choose(rng).expect("nonempty"),
                        StaticType::Function => "name",
                        _ => "length",
                    };
                    return self.emit(Opcode::GetProperty, vec![o], text(name));
                }
                10 => {
                    let (Some(o), Some(v)) = (self.pick(rng, |s| s.ty == StaticType::Object), self.pick(rng, |_| true))
                    else {
                        continue;
                    };
                    return self.emit(
                        Opcode::SetProperty,
                        vec![o, v],
                        text(FIELDS.choose(rng).expect("nonempty")),
                    );
                }
                11 => {
                    let Some(a) = self.pick(rng, |s| s.ty == StaticType::Array) else {
                        continue;
                    };
                    let any = self.pick(rng, |_| true).expect("a is visible");
                    let (name, args) = match rng.random_range(0..5) {
                        0 => ("push", vec![a, any]),
                        1 => ("pop", vec![a]),
                        2 => ("slice", vec![a]),
                        3 => ("indexOf", vec![a, any]),
                        _ => ("join", vec![a]),
                    };
                    return self.emit(Opcode::CallMethod, args, text(name));
                }
                12 => {
                    let Some(s) = self.pick(rng, |s| s.ty == StaticType::Str) else {
                        continue;
                    };
                    let (name, args) = match rng.random_range(0..4) {
                        0 => match self.pick(rng, |s| s.ty == StaticType::Int) {
                            Some(i) => ("charAt", vec![s, i]),
                            None => ("charAt", vec![s]),
                        },
                        1 => ("toUpperCase", vec![s]),
                        2 => {
                            let needle = self.pick(rng, |t| t.ty == StaticType::Str).expect("s qualifies");
                            ("indexOf", vec![s, needle])
                        }
                        _ => ("slice", vec![s]),
                    };
                    return self.emit(Opcode::CallMethod, args, text(name));
                }
                13 | 14 => {
                    let construct = rng.random_bool(0.5);
                    let Some(f) = self.pick(rng, |s| s.builtin.is_some_and(|b| !construct || b.is_constructor()))
                    else {
                        continue;
                    };
                    let mut args = vec![f];
                    match f.builtin.expect("filtered") {
                        Builtin::Object => {}
                        Builtin::Array => {
                            if rng.random_bool(0.5) {
                                args.extend(self.pick(rng, |_| true));
                                args.extend(self.pick(rng, |_| true));
                            }
                        }
                        Builtin::MathAbs | Builtin::MathFloor | Builtin::MathMax => {
                            let Some(x) = self.pick(rng, |s| s.ty.is_numeric()) else {
                                continue;
                            };
                            args.push(x);
                        }
                        Builtin::String | Builtin::Number | Builtin::ParseInt => {
                            let Some(x) = self.pick(rng, Self::primitive) else {
                                continue;
                            };
                            args.push(x);
                        }
                    }
                    let op = if construct {
                        Opcode::Construct
                    } else {
                        Opcode::CallFunction
                    };
                    return self.emit(op, args, Param::None);
                }
                _ => unreachable!(),
            }
        }
        self.load_int(rng)
    }
}

/// A well-formed program of exactly `size` instructions (`size ≥ 1`), whose
/// first instruction is a `LoadInt`.
pub fn generate_seed<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Program {
    struct Open {
        body: usize,
        visible: usize,
        is_loop: bool,
    }
    let size = size.max(1);
    let mut ctx = Ctx {
        visible: Vec::new(),
        next: 0,
    };
    let mut out = vec![ctx.load_int(rng)];
    let mut open: Vec<Open> = Vec::new();
    while out.len() < size {
        let remaining = size - out.len();
        if let Some(top) = open.last() {
            if remaining == open.len() || (top.body > 0 && rng.random_bool(0.25)) {
                let top = open.pop().expect("nonempty");
                ctx.visible.truncate(top.visible);
                let op = if top.is_loop { Opcode::EndForLoop } else { Opcode::EndIf };
                out.push(Instruction::new(op, vec![], None, Param::None));
                if let Some(parent) = open.last_mut() {
                    parent.body += 1;
                }
                continue;
            }
        }
        if remaining >= open.len() + 4 && rng.random_bool(0.15) {
            let loops = open.iter().filter(|o| o.is_loop).count();
            if loops < MAX_LOOP_DEPTH && rng.random_bool(0.5) {
                let k = rng.random_range(1..=6);
                let bound = ctx.emit(Opcode::LoadInt, vec![], Param::Int(k));
                let slot = *ctx.visible.last().expect("just emitted");
                out.push(bound);
                let visible = ctx.visible.len();
                out.push(ctx.emit(Opcode::BeginForLoop, vec![slot], Param::None));
                open.push(Open {
                    body: 0,
                    visible,
                    is_loop: true,
                });
            } else {
                let cond = ctx
                    .pick(rng, |s| s.ty == StaticType::Bool)
                    .or_else(|| ctx.pick(rng, |_| true))
                    .expect("root LoadInt is visible");
                out.push(Instruction::new(Opcode::BeginIf, vec![cond.var], None, Param::None));
                open.push(Open {
                    body: 0,
                    visible: ctx.visible.len(),
                    is_loop: false,
                });
            }
            continue;
        }
        out.push(ctx.plain(rng));
        if let Some(top) = open.last_mut() {
            top.body += 1;
        }
    }
    Program::new(out)
}

/// `count` straight-line instructions that may be inserted at `position`,
/// drawing operands from the variables visible there and numbering outputs
/// from `program.next_var`.
pub fn generate_instructions<R: Rng + ?Sized>(
    rng: &mut R,
    program: &Program,
    position: usize,
    count: usize,
) -> Vec<Instruction> {
    let types = program.static_types();
    let builtins: HashMap<Var, Builtin> = program
        .instructions
        .iter()
        .filter(|i| i.opcode == Opcode::LoadBuiltin)
        .filter_map(|i| Some((i.output?, Builtin::from_name(i.param.text()?)?)))
        .collect();
    let scopes = program.visible_vars();
    let visible = scopes
        .get(position)
        .or(scopes.last())
        .map(|vars| {
            vars.iter()
                .map(|&var| Slot {
                    var,
                    ty: types.get(&var).copied().unwrap_or(StaticType::Unknown),
                    builtin: builtins.get(&var).copied(),
                })
                .collect()
        })
        .unwrap_or_default();
    let mut ctx = Ctx {
        visible,
        next: program.next_var,
    };
    (0..count).map(|_| ctx.plain(rng)).collect()
}
