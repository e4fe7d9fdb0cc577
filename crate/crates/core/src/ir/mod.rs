//! A small SSA-style instruction language, its interpreter and its mutators.
//!
//! Programs print one instruction per line:
//!
//! ```text
//! v0 <- LoadInt '256'
//! v1 <- LoadString 'foo'
//! v2 <- BinaryOperation v0, v1, '+'
//! BeginIf v2
//! EndIf
//! ```
//!
//! A program whose last mutation could not be applied carries the header
//! line `; inapplicable` and always executes as a syntax error.

mod generate;
mod interp;
mod mutate;

pub use generate::{generate_instructions, generate_seed};
pub use interp::{branch_site, execute, site_arms, ExecResult, Outcome, BRANCH_SITES, LOOP_CAP, STEP_BUDGET};
pub use mutate::{apply_mutation, DonorPool, MutationKind, DONOR_CAPACITY};

use std::collections::HashMap;
use std::fmt;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::ArmRound;

pub type Var = u32;

pub const DEFAULT_MAX_LEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Opcode {
    LoadInt,
    LoadFloat,
    LoadString,
    LoadBuiltin,
    Construct,
    CreateArray,
    GetProperty,
    SetProperty,
    CallFunction,
    CallMethod,
    BinaryOperation,
    UnaryOperation,
    Compare,
    BeginForLoop,
    EndForLoop,
    BeginIf,
    EndIf,
    Return,
}

impl Opcode {
    pub const ALL: [Opcode; 18] = [
        Opcode::LoadInt,
        Opcode::LoadFloat,
        Opcode::LoadString,
        Opcode::LoadBuiltin,
        Opcode::Construct,
        Opcode::CreateArray,
        Opcode::GetProperty,
        Opcode::SetProperty,
        Opcode::CallFunction,
        Opcode::CallMethod,
        Opcode::BinaryOperation,
        Opcode::UnaryOperation,
        Opcode::Compare,
        Opcode::BeginForLoop,
        Opcode::EndForLoop,
        Opcode::BeginIf,
        Opcode::EndIf,
        Opcode::Return,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Opcode::LoadInt => "LoadInt",
            Opcode::LoadFloat => "LoadFloat",
            Opcode::LoadString => "LoadString",
            Opcode::LoadBuiltin => "LoadBuiltin",
            Opcode::Construct => "Construct",
            Opcode::CreateArray => "CreateArray",
            Opcode::GetProperty => "GetProperty",
            Opcode::SetProperty => "SetProperty",
            Opcode::CallFunction => "CallFunction",
            Opcode::CallMethod => "CallMethod",
            Opcode::BinaryOperation => "BinaryOperation",
            Opcode::UnaryOperation => "UnaryOperation",
            Opcode::Compare => "Compare",
            Opcode::BeginForLoop => "BeginForLoop",
            Opcode::EndForLoop => "EndForLoop",
            Opcode::BeginIf => "BeginIf",
            Opcode::EndIf => "EndIf",
            Opcode::Return => "Return",
        }
    }

    pub fn from_name(name: &str) -> Option<Opcode> {
        Opcode::ALL.into_iter().find(|op| op.name() == name)
    }

    /// Allowed input count range (inclusive).
    pub fn arity(self) -> (usize, usize) {
        use Opcode::*;
        match self {
            LoadInt | LoadFloat | LoadString | LoadBuiltin | EndForLoop | EndIf => (0, 0),
            GetProperty | UnaryOperation | BeginForLoop | BeginIf | Return => (1, 1),
            SetProperty | BinaryOperation | Compare => (2, 2),
            Construct | CallFunction | CallMethod => (1, MAX_ARGS + 1),
            CreateArray => (0, MAX_ARGS),
        }
    }

    pub fn has_output(self) -> bool {
        !matches!(
            self,
            Opcode::SetProperty | Opcode::EndForLoop | Opcode::BeginIf | Opcode::EndIf | Opcode::Return
        )
    }

    pub fn param_kind(self) -> ParamKind {
        use Opcode::*;
        match self {
            LoadInt => ParamKind::Int,
            LoadFloat => ParamKind::Float,
            LoadString | LoadBuiltin | GetProperty | SetProperty | CallMethod | BinaryOperation | UnaryOperation
            | Compare => ParamKind::Text,
            _ => ParamKind::None,
        }
    }

    pub fn is_decision_point(self) -> bool {
        matches!(self, Opcode::BeginForLoop | Opcode::BeginIf)
    }
}

pub const MAX_ARGS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    None,
    Int,
    Float,
    Text,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Param {
    None,
    Int(i64),
    Float(f64),
    Text(String),
}

impl Param {
    pub fn kind(&self) -> ParamKind {
        match self {
            Param::None => ParamKind::None,
            Param::Int(_) => ParamKind::Int,
            Param::Float(_) => ParamKind::Float,
            Param::Text(_) => ParamKind::Text,
        }
    }

    pub fn text(&self) -> Option<&str> {
        match self {
            Param::Text(s) => Some(s),
            _ => None,
        }
    }
}

pub const BINARY_OPS: [&str; 10] = ["+", "-", "*", "/", "%", "&", "|", "^", "<<", ">>"];
pub const UNARY_OPS: [&str; 5] = ["-", "!", "~", "++", "typeof"];
pub const COMPARE_OPS: [&str; 7] = ["==", "===", "!=", "<", "<=", ">", ">="];
pub const METHODS: [&str; 7] = ["push", "pop", "slice", "indexOf", "join", "charAt", "toUpperCase"];
pub const PROPERTIES: [&str; 6] = ["length", "x", "y", "0", "1", "name"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Builtin {
    Array,
    Object,
    String,
    Number,
    ParseInt,
    MathAbs,
    MathMax,
    MathFloor,
}

impl Builtin {
    pub const ALL: [Builtin; 8] = [
        Builtin::Array,
        Builtin::Object,
        Builtin::String,
        Builtin::Number,
        Builtin::ParseInt,
        Builtin::MathAbs,
        Builtin::MathMax,
        Builtin::MathFloor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Builtin::Array => "Array",
            Builtin::Object => "Object",
            Builtin::String => "String",
            Builtin::Number => "Number",
            Builtin::ParseInt => "parseInt",
            Builtin::MathAbs => "Math.abs",
            Builtin::MathMax => "Math.max",
            Builtin::MathFloor => "Math.floor",
        }
    }

    pub fn from_name(name: &str) -> Option<Builtin> {
        Builtin::ALL.into_iter().find(|b| b.name() == name)
    }

    pub fn is_constructor(self) -> bool {
        matches!(
            self,
            Builtin::Array | Builtin::Object | Builtin::String | Builtin::Number
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instruction {
    pub opcode: Opcode,
    pub inputs: Vec<Var>,
    pub output: Option<Var>,
    pub param: Param,
}

impl Instruction {
    pub fn new(opcode: Opcode, inputs: Vec<Var>, output: Option<Var>, param: Param) -> Self {
        Instruction {
            opcode,
            inputs,
            output,
            param,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Program {
    pub instructions: Vec<Instruction>,
    pub next_var: Var,
    pub inapplicable: bool,
}

/// Coarse compile-time type of a variable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StaticType {
    Int,
    Float,
    Str,
    Bool,
    Array,
    Object,
    Function,
    Unknown,
}

impl StaticType {
    pub fn is_numeric(self) -> bool {
        matches!(self, StaticType::Int | StaticType::Float)
    }

    /// Whether a variable of type `other` may stand in for one of `self`.
    pub fn accepts(self, other: StaticType) -> bool {
        self == other || (self.is_numeric() && other.is_numeric())
    }
}

impl Program {
    pub fn new(instructions: Vec<Instruction>) -> Self {
        let next_var = instructions
            .iter()
            .flat_map(|i| i.inputs.iter().copied().chain(i.output))
            .max()
            .map_or(0, |v| v + 1);
        Program {
            instructions,
            next_var,
            inapplicable: false,
        }
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    /// `1 +` the number of loop headers and conditionals.
    pub fn cyclomatic_complexity(&self) -> u32 {
        1 + self
            .instructions
            .iter()
            .filter(|i| i.opcode.is_decision_point())
            .count() as u32
    }

    /// Index of the matching end for every block opener, or a description of
    /// the first structural defect.
    pub fn block_ends(&self) -> std::result::Result<Vec<Option<usize>>, String> {
        let mut ends = vec![None; self.len()];
        let mut open: Vec<usize> = Vec::new();
        for (pc, ins) in self.instructions.iter().enumerate() {
            match ins.opcode {
                Opcode::BeginForLoop | Opcode::BeginIf => open.push(pc),
                Opcode::EndForLoop | Opcode::EndIf => {
                    let begin = open.pop().ok_or_else(|| format!("instruction {pc} closes no block"))?;
                    let expected = match ins.opcode {
                        Opcode::EndForLoop => Opcode::BeginForLoop,
                        _ => Opcode::BeginIf,
                    };
                    if self.instructions[begin].opcode != expected {
                        return Err(format!("instruction {pc} closes the block opened at {begin}"));
                    }
                    ends[begin] = Some(pc);
                }
                _ => {}
            }
        }
        match open.last() {
            Some(pc) => Err(format!("block opened at {pc} is never closed")),
            None => Ok(ends),
        }
    }

    /// Checks everything the interpreter reports as a syntax error: the
    /// inapplicable flag, arities, parameters, block structure and
    /// redeclared outputs.
    pub fn check_syntax(&self) -> std::result::Result<(), String> {
        if self.inapplicable {
            return Err("a mutation was not applicable".into());
        }
        let mut declared = std::collections::HashSet::new();
        for (pc, ins) in self.instructions.iter().enumerate() {
            let (lo, hi) = ins.opcode.arity();
            if ins.inputs.len() < lo || ins.inputs.len() > hi {
                return Err(format!("instruction {pc} has {} inputs", ins.inputs.len()));
            }
            if ins.output.is_some() != ins.opcode.has_output() {
                return Err(format!("instruction {pc} has a misplaced output"));
            }
            if ins.param.kind() != ins.opcode.param_kind() {
                return Err(format!("instruction {pc} has a misplaced parameter"));
            }
            let known = match (ins.opcode, ins.param.text()) {
                (Opcode::BinaryOperation, Some(op)) => BINARY_OPS.contains(&op),
                (Opcode::UnaryOperation, Some(op)) => UNARY_OPS.contains(&op),
                (Opcode::Compare, Some(op)) => COMPARE_OPS.contains(&op),
                _ => true,
            };
            if !known {
                return Err(format!("instruction {pc} uses an unknown operator"));
            }
            if let Some(out) = ins.output {
                if !declared.insert(out) {
                    return Err(format!("v{out} is declared twice"));
                }
            }
        }
        self.block_ends().map(|_| ())
    }

    /// Syntax plus scoping: every input is visible where it is read.
    pub fn validate(&self) -> std::result::Result<(), String> {
        self.check_syntax()?;
        let scopes = self.visible_vars();
        for (pc, ins) in self.instructions.iter().enumerate() {
            if let Some(v) = ins.inputs.iter().find(|v| !scopes[pc].contains(v)) {
                return Err(format!("instruction {pc} reads v{v}, which is not in scope"));
            }
        }
        Ok(())
    }

    /// Variables visible to each instruction; entry `len()` holds the scope
    /// at the end of the program. Unbalanced ends are ignored.
    pub fn visible_vars(&self) -> Vec<Vec<Var>> {
        let mut out = Vec::with_capacity(self.len() + 1);
        let mut scopes: Vec<Vec<Var>> = vec![Vec::new()];
        for ins in &self.instructions {
            out.push(scopes.concat());
            match ins.opcode {
                Opcode::BeginForLoop => {
                    scopes.push(ins.output.into_iter().collect());
                    continue;
                }
                Opcode::BeginIf => {
                    scopes.push(Vec::new());
                    continue;
                }
                Opcode::EndForLoop | Opcode::EndIf => {
                    if scopes.len() > 1 {
                        scopes.pop();
                    }
                }
                _ => {}
            }
            if let Some(v) = ins.output {
                scopes.last_mut().expect("root scope").push(v);
            }
        }
        out.push(scopes.concat());
        out
    }

    /// Every variable defined by an instruction before `pos`, in or out of scope.
    pub fn defined_before(&self, pos: usize) -> Vec<Var> {
        self.instructions[..pos].iter().filter_map(|i| i.output).collect()
    }

    /// Static type of every defined variable.
    pub fn static_types(&self) -> HashMap<Var, StaticType> {
        let mut types = HashMap::new();
        let mut builtins: HashMap<Var, Builtin> = HashMap::new();
        for ins in &self.instructions {
            let Some(out) = ins.output else { continue };
            let input_types: Vec<StaticType> = ins
                .inputs
                .iter()
                .map(|v| types.get(v).copied().unwrap_or(StaticType::Unknown))
                .collect();
            let callee = ins.inputs.first().and_then(|v| builtins.get(v)).copied();
            types.insert(out, infer_output(ins, &input_types, callee));
            if ins.opcode == Opcode::LoadBuiltin {
                if let Some(b) = ins.param.text().and_then(Builtin::from_name) {
                    builtins.insert(out, b);
                }
            }
        }
        types
    }

    pub fn to_text(&self) -> String {
        self.to_string()
    }

    pub fn parse(text: &str) -> Result<Program> {
        let mut instructions = Vec::new();
        let mut inapplicable = false;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = idx + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix(';') {
                if comment.trim() == "inapplicable" {
                    inapplicable = true;
                }
                continue;
            }
            instructions.push(parse_instruction(line).map_err(|message| Error::Parse { line: lineno, message })?);
        }
        let mut program = Program::new(instructions);
        program.inapplicable = inapplicable;
        Ok(program)
    }
}

/// Output type of an instruction given its input types and, for calls, the
/// builtin held by the callee.
pub fn infer_output(ins: &Instruction, inputs: &[StaticType], callee: Option<Builtin>) -> StaticType {
    use StaticType as T;
    let text = ins.param.text().unwrap_or("");
    match ins.opcode {
        Opcode::LoadInt | Opcode::BeginForLoop => T::Int,
        Opcode::LoadFloat => T::Float,
        Opcode::LoadString => T::Str,
        Opcode::LoadBuiltin => T::Function,
        Opcode::CreateArray => T::Array,
        Opcode::Compare => T::Bool,
        Opcode::Construct | Opcode::CallFunction => match callee {
            Some(Builtin::Array) => T::Array,
            Some(Builtin::Object) => T::Object,
            Some(Builtin::String) => T::Str,
            Some(Builtin::MathFloor) => T::Int,
            Some(Builtin::Number | Builtin::ParseInt | Builtin::MathAbs | Builtin::MathMax) => T::Float,
            None => T::Unknown,
        },
        Opcode::GetProperty => match (inputs.first(), text) {
            (Some(T::Array | T::Str), "length") => T::Int,
            _ => T::Unknown,
        },
        Opcode::CallMethod => match (inputs.first(), text) {
            (_, "push" | "indexOf") => T::Int,
            (_, "join" | "charAt" | "toUpperCase") => T::Str,
            (Some(&t @ (T::Array | T::Str)), "slice") => t,
            _ => T::Unknown,
        },
        Opcode::BinaryOperation => {
            let (a, b) = (inputs[0], inputs.get(1).copied().unwrap_or(T::Unknown));
            match text {
                "+" if a == T::Str || b == T::Str => T::Str,
                "&" | "|" | "^" | "<<" | ">>" => T::Int,
                "+" | "-" | "*" | "%" if a == T::Int && b == T::Int => T::Int,
                _ if a.is_numeric() && b.is_numeric() => T::Float,
                _ => T::Unknown,
            }
        }
        Opcode::UnaryOperation => match (text, inputs[0]) {
            ("!", _) => T::Bool,
            ("typeof", _) => T::Str,
            ("~", _) => T::Int,
            (_, T::Bool) => T::Int,
            (_, t) if t.is_numeric() => t,
            _ => T::Unknown,
        },
        Opcode::SetProperty | Opcode::EndForLoop | Opcode::BeginIf | Opcode::EndIf | Opcode::Return => T::Unknown,
    }
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('\'');
    for c in s.chars() {
        if c == '\'' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('\'');
    out
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(out) = self.output {
            write!(f, "v{out} <- ")?;
        }
        f.write_str(self.opcode.name())?;
        let mut args: Vec<String> = self.inputs.iter().map(|v| format!("v{v}")).collect();
        match &self.param {
            Param::None => {}
            Param::Int(v) => args.push(quote(&v.to_string())),
            Param::Float(v) => args.push(quote(&format!("{v:?}"))),
            Param::Text(s) => args.push(quote(s)),
        }
        if !args.is_empty() {
            write!(f, " {}", args.join(", "))?;
        }
        Ok(())
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut text = String::new();
        if self.inapplicable {
            text.push_str("; inapplicable\n");
        }
        for ins in &self.instructions {
            writeln!(text, "{ins}")?;
        }
        f.write_str(&text)
    }
}

fn parse_var(token: &str) -> std::result::Result<Var, String> {
    token
        .strip_prefix('v')
        .and_then(|d| d.parse::<Var>().ok())
        .ok_or_else(|| format!("expected a variable, found `{token}`"))
}

fn parse_instruction(line: &str) -> std::result::Result<Instruction, String> {
    let (output, rest) = match line.split_once("<-") {
        Some((lhs, rhs)) => (Some(parse_var(lhs.trim())?), rhs.trim()),
        None => (None, line),
    };
    let (name, mut args) = rest.split_once(' ').map_or((rest, ""), |(n, a)| (n, a.trim()));
    let opcode = Opcode::from_name(name).ok_or_else(|| format!("unknown opcode `{name}`"))?;
    let mut inputs = Vec::new();
    let mut param_text: Option<String> = None;
    while !args.is_empty() {
        if param_text.is_some() {
            return Err("the quoted parameter must come last".into());
        }
        if let Some(body) = args.strip_prefix('\'') {
            let mut value = String::new();
            let mut chars = body.char_indices();
            let mut end = None;
            while let Some((i, c)) = chars.next() {
                match c {
                    '\\' => match chars.next() {
                        Some((_, e)) => value.push(e),
                        None => return Err("dangling escape".into()),
                    },
                    '\'' => {
                        end = Some(i + 1);
                        break;
                    }
                    _ => value.push(c),
                }
            }
            let end = end.ok_or("unterminated quote")?;
            param_text = Some(value);
            args = body[end..].trim_start();
        } else {
            let cut = args.find(',').unwrap_or(args.len());
            inputs.push(parse_var(args[..cut].trim())?);
            args = args[cut..].trim_start();
        }
        if let Some(rest) = args.strip_prefix(',') {
            args = rest.trim_start();
            if args.is_empty() {
                return Err("trailing comma".into());
            }
        } else if !args.is_empty() {
            return Err(format!("expected a comma before `{args}`"));
        }
    }
    let param = match (opcode.param_kind(), param_text) {
        (_, None) => Param::None,
        (ParamKind::Int, Some(t)) => Param::Int(t.parse().map_err(|_| format!("`{t}` is not an integer"))?),
        (ParamKind::Float, Some(t)) => Param::Float(t.parse().map_err(|_| format!("`{t}` is not a number"))?),
        (ParamKind::Text, Some(t)) => Param::Text(t),
        (ParamKind::None, Some(_)) => return Err(format!("{name} takes no parameter")),
    };
    Ok(Instruction {
        opcode,
        inputs,
        output,
        param,
    })
}

/// Mutation token followed by one opcode token per instruction.
pub const VOCAB_SIZE: usize = Opcode::ALL.len() + MutationKind::ALL.len() + 1;
pub const START_TOKEN: usize = VOCAB_SIZE - 1;

pub fn opcode_token(op: Opcode) -> usize {
    op.id()
}

pub fn mutation_token(kind: MutationKind) -> usize {
    Opcode::ALL.len() + kind.id()
}

/// Arms for one fuzzing round; selects `min(n_select, len)` locations.
pub fn tokenize(program: &Program, kind: MutationKind, n_select: usize) -> Result<ArmRound> {
    if program.is_empty() {
        return Err(Error::Empty("program"));
    }
    let ids = program.instructions.iter().map(|i| opcode_token(i.opcode)).collect();
    ArmRound::tokens(Some(mutation_token(kind)), ids, n_select.min(program.len()).max(1))
}

#[cfg(test)]
mod tests;
