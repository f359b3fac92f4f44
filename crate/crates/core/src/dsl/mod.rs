//! The declarative runtime: a typed state record changed only by patches,
//! pure computed properties, and guarded actions.
//!
//! Programs are line oriented:
//!
//! ```text
//! computed modelConfidence = 1 - (predictionErrorEMA
//!                                + calibrationErrorEMA) / 2
//! computed confident       = modelConfidence >= confidenceThreshold
//!
//! action applyRevision available when shouldRevise:
//!     patch policyParameters <- nextParameters
//!     patch cooldown         <- cooldownTurns
//! ```
//!
//! A `computed` definition continues over following indented lines. An
//! action header is followed by indented `patch` lines. There are no loops,
//! no user functions and no calls into the host: everything a program reads
//! is either a state field or another computed property, and the dependency
//! graph must be acyclic.

mod parse;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::world::Cell;

pub use parse::parse_program;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DslError {
    #[error("syntax error on line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown reference `{name}` on line {line}")]
    UnknownReference { name: String, line: usize },
    #[error("cyclic dependency: {}", .0.join(" -> "))]
    CyclicDependency(Vec<String>),
    #[error("type mismatch on line {line}: {message}")]
    TypeMismatch { line: usize, message: String },
    #[error("`{name}` defined twice (line {line})")]
    Duplicate { name: String, line: usize },
    #[error("line {line}: {scope} definition may not read `{name}` from the {other} scope")]
    ScopeViolation { line: usize, name: String, scope: Scope, other: Scope },
    #[error("division by zero")]
    DivisionByZero,
    #[error("integer overflow")]
    Overflow,
    #[error("runtime type error: {0}")]
    RuntimeType(String),
    #[error("no entry `{key}` in `{field}`")]
    MissingKey { field: String, key: String },
    #[error("action `{0}` is not available")]
    ActionUnavailable(String),
    #[error("`{0}` is not declared")]
    Undeclared(String),
}

/// Layer a definition belongs to. A definition may read computed properties
/// of its own scope or of earlier scopes only, so a later layer can never
/// change what an earlier one computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Belief,
    Planning,
    Reflection,
    Revision,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Belief => "belief",
            Scope::Planning => "planning",
            Scope::Reflection => "reflection",
            Scope::Revision => "revision",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Type {
    Bool,
    Int,
    Real,
    Str,
    Cell,
    RealMap,
}

impl fmt::Display for Type {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Type::Bool => "bool",
            Type::Int => "int",
            Type::Real => "real",
            Type::Str => "string",
            Type::Cell => "cell",
            Type::RealMap => "real-map",
        })
    }
}

impl Type {
    fn is_numeric(self) -> bool {
        matches!(self, Type::Int | Type::Real)
    }

    /// Whether a value of type `from` may be stored in a slot of this type.
    fn accepts(self, from: Type) -> bool {
        self == from || (self == Type::Real && from == Type::Int)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Real(f64),
    Str(String),
    Cell(Cell),
    RealMap(BTreeMap<String, f64>),
}

impl Value {
    pub fn type_of(&self) -> Type {
        match self {
            Value::Bool(_) => Type::Bool,
            Value::Int(_) => Type::Int,
            Value::Real(_) => Type::Real,
            Value::Str(_) => Type::Str,
            Value::Cell(_) => Type::Cell,
            Value::RealMap(_) => Type::RealMap,
        }
    }

    pub fn default_for(ty: Type) -> Value {
        match ty {
            Type::Bool => Value::Bool(false),
            Type::Int => Value::Int(0),
            Type::Real => Value::Real(0.0),
            Type::Str => Value::Str(String::new()),
            Type::Cell => Value::Cell(Cell::new(0, 0)),
            Type::RealMap => Value::RealMap(BTreeMap::new()),
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            _ => None,
        }
    }

    /// Reals and ints as `f64`.
    pub fn as_real(&self) -> Option<f64> {
        match self {
            Value::Real(x) => Some(*x),
            Value::Int(i) => Some(*i as f64),
            _ => None,
        }
    }

    pub fn as_cell(&self) -> Option<Cell> {
        match self {
            Value::Cell(c) => Some(*c),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_map(&self) -> Option<&BTreeMap<String, f64>> {
        match self {
            Value::RealMap(m) => Some(m),
            _ => None,
        }
    }

    /// Widens an int to a real when the slot is real-typed.
    fn coerce(self, ty: Type) -> Value {
        match (self, ty) {
            (Value::Int(i), Type::Real) => Value::Real(i as f64),
            (v, _) => v,
        }
    }
}

impl From<bool> for Value {
    fn from(b: bool) -> Self {
        Value::Bool(b)
    }
}

impl From<i64> for Value {
    fn from(i: i64) -> Self {
        Value::Int(i)
    }
}

impl From<f64> for Value {
    fn from(x: f64) -> Self {
        Value::Real(x)
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Str(s.to_string())
    }
}

impl From<Cell> for Value {
    fn from(c: Cell) -> Self {
        Value::Cell(c)
    }
}

/// The fixed field set of a state record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Schema {
    fields: Vec<(String, Type)>,
}

impl Schema {
    pub fn new() -> Self {
        Schema::default()
    }

    pub fn from_fields(fields: &[(&str, Type)]) -> Result<Self, DslError> {
        fields.iter().try_fold(Schema::new(), |s, (name, ty)| s.field(name, *ty))
    }

    /// Adds a field; redeclaring an existing name is an error.
    pub fn field(mut self, name: &str, ty: Type) -> Result<Self, DslError> {
        if self.index_of(name).is_some() {
            return Err(DslError::Duplicate { name: name.to_string(), line: 0 });
        }
        self.fields.push((name.to_string(), ty));
        Ok(self)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|(n, _)| n == name)
    }

    pub fn type_of(&self, name: &str) -> Option<Type> {
        self.index_of(name).map(|i| self.fields[i].1)
    }

    pub fn fields(&self) -> impl Iterator<Item = (&str, Type)> {
        self.fields.iter().map(|(n, t)| (n.as_str(), *t))
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }
}

/// A patch target: a field, or one entry of a real-map field.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Path {
    pub field: String,
    pub key: Option<String>,
}

impl Path {
    pub fn parse(text: &str) -> Path {
        match text.split_once('.') {
            Some((field, key)) => Path { field: field.to_string(), key: Some(key.to_string()) },
            None => Path { field: text.to_string(), key: None },
        }
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.key {
            Some(k) => write!(f, "{}.{}", self.field, k),
            None => f.write_str(&self.field),
        }
    }
}

impl Serialize for Path {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Path {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d).map(|s| Path::parse(&s))
    }
}

/// One applied patch, as recorded in the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub path: Path,
    pub old: Value,
    pub new: Value,
}

/// Typed state. Every change goes through [`StateRecord::patch`] or an
/// action, and every change yields a [`PatchRecord`].
#[derive(Debug, Clone, PartialEq)]
pub struct StateRecord {
    schema: Arc<Schema>,
    values: Vec<Value>,
}

impl StateRecord {
    /// All fields at their type's zero value.
    pub fn new(schema: Arc<Schema>) -> Self {
        let values = schema.fields.iter().map(|(_, t)| Value::default_for(*t)).collect();
        StateRecord { schema, values }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.schema.index_of(name).map(|i| &self.values[i])
    }

    fn read(&self, path: &Path) -> Result<Value, DslError> {
        let value = self.get(&path.field).ok_or_else(|| DslError::Undeclared(path.field.clone()))?;
        match &path.key {
            None => Ok(value.clone()),
            Some(key) => map_entry(value, &path.field, key).map(Value::Real),
        }
    }

    fn check(&self, path: &Path, value: &Value) -> Result<(usize, Type), DslError> {
        let index = self.schema.index_of(&path.field).ok_or_else(|| DslError::Undeclared(path.field.clone()))?;
        let field_type = self.schema.fields[index].1;
        let slot = match (&path.key, field_type) {
            (None, t) => t,
            (Some(_), Type::RealMap) => Type::Real,
            (Some(_), t) => {
                return Err(DslError::RuntimeType(format!("`{}` is {t}, not a real-map", path.field)));
            }
        };
        if !slot.accepts(value.type_of()) {
            return Err(DslError::RuntimeType(format!(
                "cannot store {} in `{path}` ({slot})",
                value.type_of()
            )));
        }
        Ok((index, slot))
    }

    /// Applies one patch and returns its record.
    pub fn patch(&mut self, path: &str, value: impl Into<Value>) -> Result<PatchRecord, DslError> {
        let path = Path::parse(path);
        let mut records = self.apply_all(vec![(path, value.into())])?;
        Ok(records.pop().expect("one patch"))
    }

    /// Applies a batch of patches; either all are applied or none.
    fn apply_all(&mut self, patches: Vec<(Path, Value)>) -> Result<Vec<PatchRecord>, DslError> {
        let mut checked = Vec::with_capacity(patches.len());
        for (path, value) in patches {
            let (index, slot) = self.check(&path, &value)?;
            checked.push((index, path, value.coerce(slot)));
        }
        let mut records = Vec::with_capacity(checked.len());
        for (index, path, value) in checked {
            let old = self.read(&path)?;
            match &path.key {
                None => self.values[index] = value.clone(),
                Some(key) => {
                    let Value::RealMap(map) = &mut self.values[index] else { unreachable!("checked") };
                    map.insert(key.clone(), value.as_real().expect("checked real"));
                }
            }
            records.push(PatchRecord { path, old, new: value });
        }
        Ok(records)
    }
}

fn map_entry(value: &Value, field: &str, key: &str) -> Result<f64, DslError> {
    match value {
        Value::RealMap(m) => m
            .get(key)
            .copied()
            .ok_or_else(|| DslError::MissingKey { field: field.to_string(), key: key.to_string() }),
        other => Err(DslError::RuntimeType(format!("`{field}` is {}, not a real-map", other.type_of()))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Or,
    And,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Add,
    Sub,
    Mul,
    Div,
}

impl fmt::Display for BinOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BinOp::Or => "or",
            BinOp::And => "and",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
        })
    }
}

/// Resolved expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Literal(Value),
    Field(usize),
    MapEntry(usize, String),
    Computed(usize),
    Not(Box<Expr>),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Min(Vec<Expr>),
    Max(Vec<Expr>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComputedDef {
    pub name: String,
    pub scope: Scope,
    pub ty: Type,
    pub expr: Expr,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchDef {
    pub path: Path,
    pub value: Expr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionDef {
    pub name: String,
    pub scope: Scope,
    pub guard: Expr,
    pub patches: Vec<PatchDef>,
    pub line: usize,
}

/// What applying an action did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionEvent {
    pub action: String,
    pub patches: Vec<PatchRecord>,
}

/// A loaded program: immutable, shareable across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    schema: Arc<Schema>,
    computed: Vec<ComputedDef>,
    actions: Vec<ActionDef>,
}

impl Program {
    pub fn empty(schema: Arc<Schema>) -> Self {
        Program { schema, computed: Vec::new(), actions: Vec::new() }
    }

    /// Parses `text` as `scope` definitions and adds them. On error the
    /// program is left unchanged.
    pub fn extend(&mut self, scope: Scope, text: &str) -> Result<(), DslError> {
        let next = parse::extend(self, scope, text)?;
        *self = next;
        Ok(())
    }

    pub fn schema(&self) -> &Arc<Schema> {
        &self.schema
    }

    pub fn computed_defs(&self) -> &[ComputedDef] {
        &self.computed
    }

    pub fn actions(&self) -> &[ActionDef] {
        &self.actions
    }

    pub fn computed(&self, name: &str) -> Option<&ComputedDef> {
        self.computed.iter().find(|d| d.name == name)
    }

    pub fn has_scope(&self, scope: Scope) -> bool {
        self.computed.iter().any(|d| d.scope == scope) || self.actions.iter().any(|a| a.scope == scope)
    }

    fn check_state(&self, state: &StateRecord) -> Result<(), DslError> {
        if *state.schema != *self.schema {
            return Err(DslError::RuntimeType("state record does not match the program schema".into()));
        }
        Ok(())
    }

    /// Evaluates one computed property.
    pub fn eval(&self, state: &StateRecord, name: &str) -> Result<Value, DslError> {
        self.check_state(state)?;
        let index = self
            .computed
            .iter()
            .position(|d| d.name == name)
            .ok_or_else(|| DslError::Undeclared(name.to_string()))?;
        Evaluator::new(self, state).computed(index)
    }

    /// Values of every computed property in `scope`, keyed by name.
    pub fn snapshot(&self, state: &StateRecord, scope: Scope) -> Result<BTreeMap<String, Value>, DslError> {
        self.check_state(state)?;
        let mut ev = Evaluator::new(self, state);
        let mut out = BTreeMap::new();
        for (i, def) in self.computed.iter().enumerate() {
            if def.scope == scope {
                out.insert(def.name.clone(), ev.computed(i)?);
            }
        }
        Ok(out)
    }

    /// Names of the actions whose guard holds, in declaration order.
    pub fn available_actions(&self, state: &StateRecord) -> Result<Vec<&str>, DslError> {
        self.check_state(state)?;
        let mut ev = Evaluator::new(self, state);
        let mut out = Vec::new();
        for action in &self.actions {
            if ev.bool(&action.guard)? {
                out.push(action.name.as_str());
            }
        }
        Ok(out)
    }

    /// Applies an available action. Every patch's right-hand side is read
    /// from the pre-state, and the state is only replaced once all patches
    /// have been computed and type checked.
    pub fn apply_action(&self, state: &StateRecord, name: &str) -> Result<(StateRecord, ActionEvent), DslError> {
        self.check_state(state)?;
        let action = self
            .actions
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| DslError::Undeclared(name.to_string()))?;
        let mut ev = Evaluator::new(self, state);
        if !ev.bool(&action.guard)? {
            return Err(DslError::ActionUnavailable(name.to_string()));
        }
        let values = action
            .patches
            .iter()
            .map(|p| Ok((p.path.clone(), ev.expr(&p.value)?)))
            .collect::<Result<Vec<_>, DslError>>()?;
        let mut next = state.clone();
        let patches = next.apply_all(values)?;
        Ok((next, ActionEvent { action: name.to_string(), patches }))
    }
}

/// Per-call evaluator; memoizes computed values so each definition is
/// evaluated at most once per call.
struct Evaluator<'a> {
    program: &'a Program,
    state: &'a StateRecord,
    memo: Vec<Option<Value>>,
}

impl<'a> Evaluator<'a> {
    fn new(program: &'a Program, state: &'a StateRecord) -> Self {
        Evaluator { program, state, memo: vec![None; program.computed.len()] }
    }

    fn computed(&mut self, index: usize) -> Result<Value, DslError> {
        if let Some(v) = &self.memo[index] {
            return Ok(v.clone());
        }
        let def = &self.program.computed[index];
        let value = self.expr(&def.expr)?.coerce(def.ty);
        self.memo[index] = Some(value.clone());
        Ok(value)
    }

    fn bool(&mut self, expr: &Expr) -> Result<bool, DslError> {
        self.expr(expr)?
            .as_bool()
            .ok_or_else(|| DslError::RuntimeType("expected bool".into()))
    }

    fn expr(&mut self, expr: &Expr) -> Result<Value, DslError> {
        Ok(match expr {
            Expr::Literal(v) => v.clone(),
            Expr::Field(i) => self.state.values[*i].clone(),
            Expr::MapEntry(i, key) => {
                let field = &self.program.schema.fields[*i].0;
                Value::Real(map_entry(&self.state.values[*i], field, key)?)
            }
            Expr::Computed(i) => self.computed(*i)?,
            Expr::Not(e) => Value::Bool(!self.bool(e)?),
            Expr::Neg(e) => match self.expr(e)? {
                Value::Int(i) => Value::Int(i.checked_neg().ok_or(DslError::Overflow)?),
                Value::Real(x) => Value::Real(-x),
                v => return Err(DslError::RuntimeType(format!("cannot negate {}", v.type_of()))),
            },
            Expr::Binary(BinOp::And, a, b) => Value::Bool(self.bool(a)? && self.bool(b)?),
            Expr::Binary(BinOp::Or, a, b) => Value::Bool(self.bool(a)? || self.bool(b)?),
            Expr::Binary(op, a, b) => {
                let (a, b) = (self.expr(a)?, self.expr(b)?);
                binary(*op, a, b)?
            }
            Expr::Min(args) | Expr::Max(args) => {
                let values = args.iter().map(|a| self.expr(a)).collect::<Result<Vec<_>, _>>()?;
                let pick_min = matches!(expr, Expr::Min(_));
                if values.iter().all(|v| matches!(v, Value::Int(_))) {
                    let ints = values.iter().filter_map(Value::as_int);
                    Value::Int(if pick_min { ints.min() } else { ints.max() }.expect("min/max has arguments"))
                } else {
                    let mut acc = numeric(&values[0])?;
                    for v in &values[1..] {
                        let x = numeric(v)?;
                        acc = if pick_min { acc.min(x) } else { acc.max(x) };
                    }
                    Value::Real(acc)
                }
            }
        })
    }
}

fn numeric(v: &Value) -> Result<f64, DslError> {
    v.as_real()
        .ok_or_else(|| DslError::RuntimeType(format!("expected a number, found {}", v.type_of())))
}

fn binary(op: BinOp, a: Value, b: Value) -> Result<Value, DslError> {
    use BinOp::*;
    match op {
        Eq | Ne => {
            let equal = match (&a, &b) {
                (Value::Int(_) | Value::Real(_), Value::Int(_) | Value::Real(_)) => {
                    if let (Value::Int(x), Value::Int(y)) = (&a, &b) {
                        x == y
                    } else {
                        numeric(&a)? == numeric(&b)?
                    }
                }
                _ if a.type_of() == b.type_of() => a == b,
                _ => return Err(DslError::RuntimeType(format!("cannot compare {} with {}", a.type_of(), b.type_of()))),
            };
            Ok(Value::Bool(equal == (op == Eq)))
        }
        Lt | Le | Gt | Ge => {
            let ord = match (&a, &b) {
                (Value::Int(x), Value::Int(y)) => x.partial_cmp(y),
                _ => numeric(&a)?.partial_cmp(&numeric(&b)?),
            };
            let Some(ord) = ord else {
                return Ok(Value::Bool(false));
            };
            Ok(Value::Bool(match op {
                Lt => ord.is_lt(),
                Le => ord.is_le(),
                Gt => ord.is_gt(),
                _ => ord.is_ge(),
            }))
        }
        Add | Sub | Mul => match (&a, &b) {
            (Value::Int(x), Value::Int(y)) => {
                let r = match op {
                    Add => x.checked_add(*y),
                    Sub => x.checked_sub(*y),
                    _ => x.checked_mul(*y),
                };
                r.map(Value::Int).ok_or(DslError::Overflow)
            }
            _ => {
                let (x, y) = (numeric(&a)?, numeric(&b)?);
                Ok(Value::Real(match op {
                    Add => x + y,
                    Sub => x - y,
                    _ => x * y,
                }))
            }
        },
        Div => {
            let (x, y) = (numeric(&a)?, numeric(&b)?);
            if y == 0.0 {
                return Err(DslError::DivisionByZero);
            }
            Ok(Value::Real(x / y))
        }
        And | Or => unreachable!("short-circuited by the evaluator"),
    }
}

#[cfg(test)]
mod tests;
