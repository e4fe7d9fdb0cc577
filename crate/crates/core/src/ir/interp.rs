//! Deterministic interpreter with per-arm branch instrumentation.
//!
//! Every handler dispatches on the dynamic types of its operands; each
//! dispatch arm, loop entry/exit and conditional direction is one branch
//! site. The site count is fixed, so branch vectors of all executions have
//! the same length.

use std::rc::Rc;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::{Builtin, Instruction, Opcode, Program, Var, BINARY_OPS, UNARY_OPS};

pub const LOOP_CAP: i64 = 256;
/// Executed-instruction budget; exceeding it is a range error.
pub const STEP_BUDGET: usize = 20_000;
const INT_BOUND: i64 = 1 << 53;
const MAX_ARRAY: usize = 1024;
const MAX_STRING: usize = 4096;
const MAX_KEYS: usize = 64;

// Arms per opcode, in `Opcode::ALL` order.
//   LoadInt: small, large             LoadFloat: integral, fractional
//   LoadString: empty, nonempty       LoadBuiltin: one per builtin, unknown
//   Construct: Array, Object, String, Number, not a constructor
//   CreateArray: empty, homogeneous, mixed
//   Get/SetProperty: receiver tag (undefined, bool, int, float, string, array, object, function)
//   CallFunction: one per builtin, not a function
//   CallMethod: array push/pop/slice/indexOf/join, string charAt/indexOf/slice/toUpperCase,
//               receiver without methods, unknown method
//   BinaryOperation: family (additive, multiplicative, bitwise) x class (int, float, string, bool, incompatible)
//   UnaryOperation: operator x (numeric, other)
//   Compare: family (equality, relational) x class (int, float, string, bool, other)
//   BeginForLoop: entered, skipped, bad bound, over cap
//   EndForLoop: back edge, exit      BeginIf: taken, not taken
const ARMS: [usize; 18] = [2, 2, 2, 9, 5, 3, 8, 8, 9, 11, 15, 10, 10, 4, 2, 2, 1, 1];

const fn bases() -> [usize; 18] {
    let mut out = [0; 18];
    let mut i = 1;
    while i < 18 {
        out[i] = out[i - 1] + ARMS[i - 1];
        i += 1;
    }
    out
}

const BASES: [usize; 18] = bases();
pub const BRANCH_SITES: usize = BASES[17] + ARMS[17];

pub fn site_arms(op: Opcode) -> usize {
    ARMS[op.id()]
}

pub fn branch_site(op: Opcode, arm: usize) -> Option<usize> {
    (arm < ARMS[op.id()]).then(|| BASES[op.id()] + arm)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Valid,
    SyntaxError,
    ReferenceError,
    TypeError,
    RangeError,
}

impl Outcome {
    pub const ALL: [Outcome; 5] = [
        Outcome::Valid,
        Outcome::SyntaxError,
        Outcome::ReferenceError,
        Outcome::TypeError,
        Outcome::RangeError,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Outcome::Valid => "Valid",
            Outcome::SyntaxError => "SyntaxError",
            Outcome::ReferenceError => "ReferenceError",
            Outcome::TypeError => "TypeError",
            Outcome::RangeError => "RangeError",
        }
    }

    pub fn is_valid(self) -> bool {
        self == Outcome::Valid
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecResult {
    pub outcome: Outcome,
    pub branch_counts: Vec<u32>,
    pub cc: u32,
}

impl ExecResult {
    pub fn counts(&self) -> Array1<f64> {
        self.branch_counts.iter().map(|&c| c as f64).collect()
    }

    pub fn sites_hit(&self) -> usize {
        self.branch_counts.iter().filter(|&&c| c > 0).count()
    }
}

pub fn execute(program: &Program) -> ExecResult {
    let cc = program.cyclomatic_complexity();
    let mut counts = vec![0; BRANCH_SITES];
    let outcome = if program.check_syntax().is_err() {
        Outcome::SyntaxError
    } else {
        let ends = program.block_ends().expect("syntax checked");
        let mut machine = Machine::new(program, ends, &mut counts);
        match machine.run() {
            Ok(()) => Outcome::Valid,
            Err(e) => e,
        }
    };
    ExecResult {
        outcome,
        branch_counts: counts,
        cc,
    }
}

type Step<T> = std::result::Result<T, Outcome>;

#[derive(Clone, Debug)]
enum Value {
    Undefined,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(Rc<str>),
    Array(usize),
    Object(usize),
    Function(Builtin),
}

fn tag(v: &Value) -> usize {
    match v {
        Value::Undefined => 0,
        Value::Bool(_) => 1,
        Value::Int(_) => 2,
        Value::Float(_) => 3,
        Value::Str(_) => 4,
        Value::Array(_) => 5,
        Value::Object(_) => 6,
        Value::Function(_) => 7,
    }
}

fn truthy(v: &Value) -> bool {
    match v {
        Value::Undefined => false,
        Value::Bool(b) => *b,
        Value::Int(i) => *i != 0,
        Value::Float(f) => *f != 0.0 && !f.is_nan(),
        Value::Str(s) => !s.is_empty(),
        Value::Array(_) | Value::Object(_) | Value::Function(_) => true,
    }
}

fn num(v: &Value) -> Option<f64> {
    match v {
        Value::Bool(b) => Some(f64::from(u8::from(*b))),
        Value::Int(i) => Some(*i as f64),
        Value::Float(f) => Some(*f),
        _ => None,
    }
}

fn int_of(v: &Value) -> Option<i64> {
    match v {
        Value::Bool(b) => Some(i64::from(*b)),
        Value::Int(i) => Some(*i),
        _ => None,
    }
}

fn int(v: i64) -> Step<Value> {
    if (-INT_BOUND..=INT_BOUND).contains(&v) {
        Ok(Value::Int(v))
    } else {
        Err(Outcome::RangeError)
    }
}

fn checked(v: Option<i64>) -> Step<Value> {
    v.map_or(Err(Outcome::RangeError), int)
}

fn float(v: f64) -> Step<Value> {
    if v.is_finite() {
        Ok(Value::Float(v))
    } else {
        Err(Outcome::RangeError)
    }
}

fn string(s: String) -> Step<Value> {
    if s.chars().count() > MAX_STRING {
        Err(Outcome::RangeError)
    } else {
        Ok(Value::Str(s.into()))
    }
}

fn to_int32(f: f64) -> i32 {
    if !f.is_finite() {
        return 0;
    }
    let m = f.trunc().rem_euclid(4_294_967_296.0);
    (if m >= 2_147_483_648.0 { m - 4_294_967_296.0 } else { m }) as i32
}

fn bitwise(op: &str, p: i32, q: i32) -> Value {
    let r = match op {
        "&" => p & q,
        "|" => p | q,
        "^" => p ^ q,
        "<<" => p.wrapping_shl((q & 31) as u32),
        _ => p >> (q & 31),
    };
    Value::Int(i64::from(r))
}

fn parse_number(s: &str) -> Value {
    let t = s.trim();
    if t.is_empty() {
        return Value::Int(0);
    }
    if let Ok(i) = t.parse::<i64>() {
        if (-INT_BOUND..=INT_BOUND).contains(&i) {
            return Value::Int(i);
        }
    }
    match t.parse::<f64>() {
        Ok(f) if f.is_finite() => Value::Float(f),
        _ => Value::Float(f64::NAN),
    }
}

/// Resolves a slice bound the way array/string `slice` does.
fn slice_bound(arg: Option<&Value>, len: usize, default: usize) -> Step<usize> {
    match arg {
        None => Ok(default),
        Some(v) => {
            let rel = int_of(v).ok_or(Outcome::TypeError)?;
            Ok(if rel < 0 {
                (len as i64 + rel).max(0) as usize
            } else {
                (rel as usize).min(len)
            })
        }
    }
}

struct Frame {
    defined: Vec<Var>,
    looping: Option<LoopState>,
}

struct LoopState {
    begin: usize,
    counter: i64,
    bound: i64,
    var: Var,
}

struct Machine<'p, 'c> {
    program: &'p Program,
    ends: Vec<Option<usize>>,
    vals: Vec<Option<Value>>,
    frames: Vec<Frame>,
    counts: &'c mut [u32],
    arrays: Vec<Vec<Value>>,
    objects: Vec<Vec<(String, Value)>>,
}

enum Flow {
    Next(usize),
    Halt,
}

impl<'p, 'c> Machine<'p, 'c> {
    fn new(program: &'p Program, ends: Vec<Option<usize>>, counts: &'c mut [u32]) -> Self {
        let slots = program
            .instructions
            .iter()
            .flat_map(|i| i.inputs.iter().copied().chain(i.output))
            .max()
            .map_or(0, |v| v as usize + 1);
        Machine {
            program,
            ends,
            vals: vec![None; slots],
            frames: Vec::new(),
            counts,
            arrays: Vec::new(),
            objects: Vec::new(),
        }
    }

    fn hit(&mut self, op: Opcode, arm: usize) {
        debug_assert!(arm < ARMS[op.id()]);
        let c = &mut self.counts[BASES[op.id()] + arm];
        *c = c.saturating_add(1);
    }

    fn get(&self, v: Var) -> Step<Value> {
        self.vals
            .get(v as usize)
            .cloned()
            .flatten()
            .ok_or(Outcome::ReferenceError)
    }

    fn define(&mut self, v: Var, value: Value) {
        self.vals[v as usize] = Some(value);
        if let Some(frame) = self.frames.last_mut() {
            frame.defined.push(v);
        }
    }

    fn forget(&mut self, vars: &[Var]) {
        for &v in vars {
            self.vals[v as usize] = None;
        }
    }

    fn run(&mut self) -> Step<()> {
        let mut pc = 0;
        let mut steps = 0;
        while pc < self.program.instructions.len() {
            steps += 1;
            if steps > STEP_BUDGET {
                return Err(Outcome::RangeError);
            }
            match self.exec(pc)? {
                Flow::Next(next) => pc = next,
                Flow::Halt => break,
            }
        }
        Ok(())
    }

    fn exec(&mut self, pc: usize) -> Step<Flow> {
        let ins: &'p Instruction = &self.program.instructions[pc];
        let text = ins.param.text().unwrap_or("");
        let args = ins.inputs.iter().map(|&v| self.get(v)).collect::<Step<Vec<Value>>>()?;
        let op = ins.opcode;
        let result = match op {
            Opcode::LoadInt => {
                let super::Param::Int(v) = ins.param else {
                    unreachable!()
                };
                self.hit(op, usize::from(v.unsigned_abs() > 65_535));
                Some(int(v)?)
            }
            Opcode::LoadFloat => {
                let super::Param::Float(v) = ins.param else {
                    unreachable!()
                };
                self.hit(op, usize::from(v.fract() != 0.0 || !v.is_finite()));
                Some(float(v)?)
            }
            Opcode::LoadString => {
                self.hit(op, usize::from(!text.is_empty()));
                Some(string(text.to_owned())?)
            }
            Opcode::LoadBuiltin => match Builtin::from_name(text) {
                Some(b) => {
                    self.hit(op, b as usize);
                    Some(Value::Function(b))
                }
                None => {
                    self.hit(op, 8);
                    return Err(Outcome::ReferenceError);
                }
            },
            Opcode::Construct => {
                let b = match &args[0] {
                    Value::Function(b) if b.is_constructor() => *b,
                    _ => {
                        self.hit(op, 4);
                        return Err(Outcome::TypeError);
                    }
                };
                self.hit(op, b as usize);
                Some(self.call(b, &args[1..])?)
            }
            Opcode::CreateArray => {
                let arm = match args.first() {
                    None => 0,
                    Some(first) if args.iter().all(|a| tag(a) == tag(first)) => 1,
                    Some(_) => 2,
                };
                self.hit(op, arm);
                self.arrays.push(args);
                Some(Value::Array(self.arrays.len() - 1))
            }
            Opcode::GetProperty => {
                self.hit(op, tag(&args[0]));
                Some(self.get_property(&args[0], text)?)
            }
            Opcode::SetProperty => {
                self.hit(op, tag(&args[0]));
                self.set_property(&args[0], text, args[1].clone())?;
                None
            }
            Opcode::CallFunction => match args[0] {
                Value::Function(b) => {
                    self.hit(op, b as usize);
                    Some(self.call(b, &args[1..])?)
                }
                _ => {
                    self.hit(op, 8);
                    return Err(Outcome::TypeError);
                }
            },
            Opcode::CallMethod => Some(self.call_method(&args[0], text, &args[1..])?),
            Opcode::BinaryOperation => Some(self.binary(text, &args[0], &args[1])?),
            Opcode::UnaryOperation => Some(self.unary(text, &args[0])?),
            Opcode::Compare => Some(self.compare(text, &args[0], &args[1])),
            Opcode::BeginForLoop => {
                let end = self.ends[pc].expect("balanced");
                let bound = match args[0] {
                    Value::Int(n) => n,
                    _ => {
                        self.hit(op, 2);
                        return Err(Outcome::TypeError);
                    }
                };
                if bound > LOOP_CAP {
                    self.hit(op, 3);
                    return Err(Outcome::RangeError);
                }
                if bound <= 0 {
                    self.hit(op, 1);
                    return Ok(Flow::Next(end + 1));
                }
                self.hit(op, 0);
                let var = ins.output.expect("checked");
                self.frames.push(Frame {
                    defined: Vec::new(),
                    looping: Some(LoopState {
                        begin: pc,
                        counter: 0,
                        bound,
                        var,
                    }),
                });
                self.define(var, Value::Int(0));
                return Ok(Flow::Next(pc + 1));
            }
            Opcode::EndForLoop => {
                let mut frame = self.frames.pop().expect("balanced");
                self.forget(&frame.defined);
                let state = frame.looping.as_mut().expect("loop frame");
                state.counter += 1;
                if state.counter < state.bound {
                    self.hit(op, 0);
                    let (begin, var, counter) = (state.begin, state.var, state.counter);
                    frame.defined.clear();
                    self.frames.push(frame);
                    self.define(var, Value::Int(counter));
                    return Ok(Flow::Next(begin + 1));
                }
                self.hit(op, 1);
                return Ok(Flow::Next(pc + 1));
            }
            Opcode::BeginIf => {
                if truthy(&args[0]) {
                    self.hit(op, 0);
                    self.frames.push(Frame {
                        defined: Vec::new(),
                        looping: None,
                    });
                    return Ok(Flow::Next(pc + 1));
                }
                self.hit(op, 1);
                return Ok(Flow::Next(self.ends[pc].expect("balanced") + 1));
            }
            Opcode::EndIf => {
                self.hit(op, 0);
                let frame = self.frames.pop().expect("balanced");
                self.forget(&frame.defined);
                return Ok(Flow::Next(pc + 1));
            }
            Opcode::Return => {
                self.hit(op, 0);
                return Ok(Flow::Halt);
            }
        };
        if let (Some(out), Some(value)) = (ins.output, result) {
            self.define(out, value);
        }
        Ok(Flow::Next(pc + 1))
    }

    fn display_into(&self, v: &Value, depth: usize, out: &mut String) {
        if out.len() > MAX_STRING {
            return;
        }
        match v {
            Value::Undefined => out.push_str("undefined"),
            Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
            Value::Int(i) => out.push_str(&i.to_string()),
            Value::Float(f) => out.push_str(&f.to_string()),
            Value::Str(s) => out.push_str(s),
            Value::Array(h) => {
                if depth > 3 {
                    return;
                }
                for (i, e) in self.arrays[*h].iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    if !matches!(e, Value::Undefined) {
                        self.display_into(e, depth + 1, out);
                    }
                    if out.len() > MAX_STRING {
                        return;
                    }
                }
            }
            Value::Object(_) => out.push_str("[object Object]"),
            Value::Function(b) => {
                out.push_str("function ");
                out.push_str(b.name());
                out.push_str("() { [native code] }");
            }
        }
    }

    fn display(&self, v: &Value) -> String {
        let mut out = String::new();
        self.display_into(v, 0, &mut out);
        out
    }

    fn strict_eq(&self, a: &Value, b: &Value) -> bool {
        match (a, b) {
            (Value::Undefined, Value::Undefined) => true,
            (Value::Bool(x), Value::Bool(y)) => x == y,
            (Value::Int(_) | Value::Float(_), Value::Int(_) | Value::Float(_)) => num(a) == num(b),
            (Value::Str(x), Value::Str(y)) => x == y,
            (Value::Array(x), Value::Array(y)) | (Value::Object(x), Value::Object(y)) => x == y,
            (Value::Function(x), Value::Function(y)) => x == y,
            _ => false,
        }
    }

    fn loose_eq(&self, a: &Value, b: &Value) -> bool {
        match (a, b) {
            (Value::Str(s), other) | (other, Value::Str(s)) if num(other).is_some() => {
                num(&parse_number(s)) == num(other)
            }
            _ if num(a).is_some() && num(b).is_some() => num(a) == num(b),
            _ => self.strict_eq(a, b),
        }
    }

    fn new_array(&mut self, items: Vec<Value>) -> Step<Value> {
        if items.len() > MAX_ARRAY {
            return Err(Outcome::RangeError);
        }
        self.arrays.push(items);
        Ok(Value::Array(self.arrays.len() - 1))
    }

    fn call(&mut self, b: Builtin, args: &[Value]) -> Step<Value> {
        match b {
            Builtin::Array => match args {
                [Value::Int(n)] => {
                    if *n < 0 || *n as usize > MAX_ARRAY {
                        return Err(Outcome::RangeError);
                    }
                    self.new_array(vec![Value::Undefined; *n as usize])
                }
                _ => self.new_array(args.to_vec()),
            },
            Builtin::Object => {
                self.objects.push(Vec::new());
                Ok(Value::Object(self.objects.len() - 1))
            }
            Builtin::String => string(args.first().map(|a| self.display(a)).unwrap_or_default()),
            Builtin::Number => Ok(match args.first() {
                None => Value::Int(0),
                Some(Value::Int(i)) => Value::Int(*i),
                Some(Value::Float(f)) => Value::Float(*f),
                Some(Value::Bool(b)) => Value::Int(i64::from(*b)),
                Some(Value::Str(s)) => parse_number(s),
                Some(_) => Value::Float(f64::NAN),
            }),
            Builtin::ParseInt => match args.first() {
                Some(Value::Int(i)) => Ok(Value::Int(*i)),
                Some(Value::Float(f)) if f.is_finite() => int(f.trunc() as i64),
                Some(Value::Str(s)) => {
                    let t = s.trim_start();
                    let sign_len = usize::from(t.starts_with(['-', '+']));
                    let digits = t[sign_len..].chars().take_while(char::is_ascii_digit).count();
                    match t[..sign_len + digits].parse::<i64>() {
                        Ok(v) => int(v),
                        Err(_) if digits > 0 => Err(Outcome::RangeError),
                        Err(_) => Ok(Value::Float(f64::NAN)),
                    }
                }
                _ => Ok(Value::Float(f64::NAN)),
            },
            Builtin::MathAbs => match args.first() {
                Some(Value::Int(i)) => checked(i.checked_abs()),
                Some(Value::Bool(b)) => Ok(Value::Int(i64::from(*b))),
                Some(Value::Float(f)) => Ok(Value::Float(f.abs())),
                _ => Err(Outcome::TypeError),
            },
            Builtin::MathMax => {
                if args.is_empty() || args.iter().any(|a| num(a).is_none()) {
                    return Err(Outcome::TypeError);
                }
                if args.iter().all(|a| int_of(a).is_some()) {
                    Ok(Value::Int(args.iter().filter_map(int_of).max().expect("nonempty")))
                } else {
                    let m = args.iter().filter_map(num).fold(f64::NEG_INFINITY, f64::max);
                    float(m)
                }
            }
            Builtin::MathFloor => match args.first() {
                Some(v @ (Value::Int(_) | Value::Bool(_))) => Ok(Value::Int(int_of(v).expect("integer"))),
                Some(Value::Float(f)) => {
                    let fl = f.floor();
                    if fl.is_finite() && fl.abs() <= INT_BOUND as f64 {
                        Ok(Value::Int(fl as i64))
                    } else {
                        Err(Outcome::RangeError)
                    }
                }
                _ => Err(Outcome::TypeError),
            },
        }
    }

    fn get_property(&self, target: &Value, name: &str) -> Step<Value> {
        let index = name.parse::<usize>().ok();
        match target {
            Value::Undefined | Value::Bool(_) | Value::Int(_) | Value::Float(_) => Err(Outcome::TypeError),
            Value::Str(s) => Ok(match (name, index) {
                ("length", _) => Value::Int(s.chars().count() as i64),
                (_, Some(i)) => s
                    .chars()
                    .nth(i)
                    .map_or(Value::Undefined, |c| Value::Str(c.to_string().into())),
                _ => Value::Undefined,
            }),
            Value::Array(h) => {
                let items = &self.arrays[*h];
                match (name, index) {
                    ("length", _) => Ok(Value::Int(items.len() as i64)),
                    (_, Some(i)) => items.get(i).cloned().ok_or(Outcome::RangeError),
                    _ => Ok(Value::Undefined),
                }
            }
            Value::Object(h) => Ok(self.objects[*h]
                .iter()
                .find(|(k, _)| k == name)
                .map_or(Value::Undefined, |(_, v)| v.clone())),
            Value::Function(b) => Ok(match name {
                "name" => Value::Str(b.name().into()),
                "length" => Value::Int(1),
                _ => Value::Undefined,
            }),
        }
    }

    fn set_property(&mut self, target: &Value, name: &str, value: Value) -> Step<()> {
        match target {
            Value::Undefined | Value::Bool(_) | Value::Int(_) | Value::Float(_) => Err(Outcome::TypeError),
            Value::Str(_) | Value::Function(_) => Ok(()),
            Value::Array(h) => {
                let items = &mut self.arrays[*h];
                if name == "length" {
                    match value {
                        Value::Int(n) if n >= 0 && n as usize <= MAX_ARRAY => {
                            items.resize(n as usize, Value::Undefined);
                            Ok(())
                        }
                        _ => Err(Outcome::RangeError),
                    }
                } else if let Ok(i) = name.parse::<usize>() {
                    if i < items.len() {
                        items[i] = value;
                        Ok(())
                    } else if i == items.len() && i < MAX_ARRAY {
                        items.push(value);
                        Ok(())
                    } else {
                        Err(Outcome::RangeError)
                    }
                } else {
                    Ok(())
                }
            }
            Value::Object(h) => {
                let fields = &mut self.objects[*h];
                if let Some(slot) = fields.iter_mut().find(|(k, _)| k == name) {
                    slot.1 = value;
                } else if fields.len() >= MAX_KEYS {
                    return Err(Outcome::RangeError);
                } else {
                    fields.push((name.to_owned(), value));
                }
                Ok(())
            }
        }
    }

    fn call_method(&mut self, recv: &Value, name: &str, args: &[Value]) -> Step<Value> {
        let op = Opcode::CallMethod;
        match recv {
            Value::Array(h) => {
                let h = *h;
                let arm = match name {
                    "push" => 0,
                    "pop" => 1,
                    "slice" => 2,
                    "indexOf" => 3,
                    "join" => 4,
                    _ => {
                        self.hit(op, 10);
                        return Err(Outcome::TypeError);
                    }
                };
                self.hit(op, arm);
                match arm {
                    0 => {
                        if self.arrays[h].len() + args.len() > MAX_ARRAY {
                            return Err(Outcome::RangeError);
                        }
                        self.arrays[h].extend_from_slice(args);
                        Ok(Value::Int(self.arrays[h].len() as i64))
                    }
                    1 => Ok(self.arrays[h].pop().unwrap_or(Value::Undefined)),
                    2 => {
                        let len = self.arrays[h].len();
                        let start = slice_bound(args.first(), len, 0)?;
                        let end = slice_bound(args.get(1), len, len)?;
                        let items = self.arrays[h][start..end.max(start)].to_vec();
                        self.new_array(items)
                    }
                    3 => {
                        let needle = args.first().cloned().unwrap_or(Value::Undefined);
                        let pos = self.arrays[h].iter().position(|e| self.strict_eq(e, &needle));
                        Ok(Value::Int(pos.map_or(-1, |p| p as i64)))
                    }
                    _ => {
                        let sep = args.first().map_or_else(|| ",".to_owned(), |s| self.display(s));
                        let mut out = String::new();
                        for (i, e) in self.arrays[h].iter().enumerate() {
                            if i > 0 {
                                out.push_str(&sep);
                            }
                            if !matches!(e, Value::Undefined) {
                                self.display_into(e, 1, &mut out);
                            }
                            if out.len() > MAX_STRING {
                                return Err(Outcome::RangeError);
                            }
                        }
                        string(out)
                    }
                }
            }
            Value::Str(s) => {
                let arm = match name {
                    "charAt" => 5,
                    "indexOf" => 6,
                    "slice" => 7,
                    "toUpperCase" => 8,
                    _ => {
                        self.hit(op, 10);
                        return Err(Outcome::TypeError);
                    }
                };
                self.hit(op, arm);
                let chars: Vec<char> = s.chars().collect();
                match arm {
                    5 => {
                        let i = match args.first() {
                            None => 0,
                            Some(v) => int_of(v).ok_or(Outcome::TypeError)?,
                        };
                        let c = usize::try_from(i).ok().and_then(|i| chars.get(i));
                        Ok(Value::Str(c.map(|c| c.to_string()).unwrap_or_default().into()))
                    }
                    6 => {
                        let needle = args.first().map_or_else(|| "undefined".to_owned(), |v| self.display(v));
                        Ok(Value::Int(
                            s.find(&needle).map_or(-1, |byte| s[..byte].chars().count() as i64),
                        ))
                    }
                    7 => {
                        let start = slice_bound(args.first(), chars.len(), 0)?;
                        let end = slice_bound(args.get(1), chars.len(), chars.len())?;
                        Ok(Value::Str(
                            chars[start..end.max(start)].iter().collect::<String>().into(),
                        ))
                    }
                    _ => string(s.to_uppercase()),
                }
            }
            _ => {
                self.hit(op, 9);
                Err(Outcome::TypeError)
            }
        }
    }

    fn binary(&mut self, op: &str, a: &Value, b: &Value) -> Step<Value> {
        let family = match op {
            "+" | "-" => 0,
            "*" | "/" | "%" => 1,
            _ => 2,
        };
        let primitive = |v: &Value| matches!(v, Value::Bool(_) | Value::Int(_) | Value::Float(_) | Value::Str(_));
        let is_str = |v: &Value| matches!(v, Value::Str(_));
        let numeric = num(a).is_some() && num(b).is_some();
        let class = if op == "+" && (is_str(a) || is_str(b)) && primitive(a) && primitive(b) {
            2
        } else if numeric && (matches!(a, Value::Bool(_)) || matches!(b, Value::Bool(_))) {
            3
        } else if matches!((a, b), (Value::Int(_), Value::Int(_))) {
            0
        } else if numeric {
            1
        } else {
            4
        };
        debug_assert!(BINARY_OPS.contains(&op));
        self.hit(Opcode::BinaryOperation, family * 5 + class);
        match class {
            2 => {
                let mut s = self.display(a);
                s.push_str(&self.display(b));
                string(s)
            }
            4 => Err(Outcome::TypeError),
            _ => match (int_of(a), int_of(b)) {
                (Some(x), Some(y)) => match op {
                    "+" => checked(x.checked_add(y)),
                    "-" => checked(x.checked_sub(y)),
                    "*" => checked(x.checked_mul(y)),
                    "/" => {
                        if y == 0 {
                            Err(Outcome::RangeError)
                        } else if x.checked_rem(y) == Some(0) {
                            checked(x.checked_div(y))
                        } else {
                            float(x as f64 / y as f64)
                        }
                    }
                    "%" => {
                        if y == 0 {
                            Err(Outcome::RangeError)
                        } else {
                            checked(x.checked_rem(y))
                        }
                    }
                    _ => Ok(bitwise(op, x as i32, y as i32)),
                },
                _ => {
                    let (x, y) = (num(a).expect("numeric"), num(b).expect("numeric"));
                    match op {
                        "+" => float(x + y),
                        "-" => float(x - y),
                        "*" => float(x * y),
                        "/" => float(x / y),
                        "%" => float(x % y),
                        _ => Ok(bitwise(op, to_int32(x), to_int32(y))),
                    }
                }
            },
        }
    }

    fn unary(&mut self, op: &str, a: &Value) -> Step<Value> {
        let index = UNARY_OPS.iter().position(|o| *o == op).expect("syntax checked");
        let numeric = num(a).is_some();
        self.hit(Opcode::UnaryOperation, index * 2 + usize::from(!numeric));
        match op {
            "!" => Ok(Value::Bool(!truthy(a))),
            "typeof" => Ok(Value::Str(
                match a {
                    Value::Undefined => "undefined",
                    Value::Bool(_) => "boolean",
                    Value::Int(_) | Value::Float(_) => "number",
                    Value::Str(_) => "string",
                    Value::Array(_) | Value::Object(_) => "object",
                    Value::Function(_) => "function",
                }
                .into(),
            )),
            _ if !numeric => Err(Outcome::TypeError),
            "~" => Ok(Value::Int(i64::from(!to_int32(num(a).expect("numeric"))))),
            "-" => match a {
                Value::Float(f) => Ok(Value::Float(-f)),
                _ => checked(int_of(a).expect("integer").checked_neg()),
            },
            _ => match a {
                Value::Float(f) => float(f + 1.0),
                _ => checked(int_of(a).expect("integer").checked_add(1)),
            },
        }
    }

    fn compare(&mut self, op: &str, a: &Value, b: &Value) -> Value {
        let equality = matches!(op, "==" | "===" | "!=");
        let numeric = num(a).is_some() && num(b).is_some();
        let class = match (a, b) {
            (Value::Int(_), Value::Int(_)) => 0,
            (Value::Str(_), Value::Str(_)) => 2,
            _ if numeric && (matches!(a, Value::Bool(_)) || matches!(b, Value::Bool(_))) => 3,
            _ if numeric => 1,
            _ => 4,
        };
        self.hit(Opcode::Compare, usize::from(!equality) * 5 + class);
        let result = match op {
            "===" => self.strict_eq(a, b),
            "==" => self.loose_eq(a, b),
            "!=" => !self.loose_eq(a, b),
            _ => {
                let ord = match (a, b) {
                    (Value::Str(x), Value::Str(y)) => Some(x.cmp(y)),
                    _ if numeric => num(a).and_then(|x| num(b).and_then(|y| x.partial_cmp(&y))),
                    _ => None,
                };
                match (op, ord) {
                    (_, None) => false,
                    ("<", Some(o)) => o.is_lt(),
                    ("<=", Some(o)) => o.is_le(),
                    (">", Some(o)) => o.is_gt(),
                    (_, Some(o)) => o.is_ge(),
                }
            }
        };
        Value::Bool(result)
    }
}
