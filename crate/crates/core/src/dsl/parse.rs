use std::collections::HashMap;
use std::sync::Arc;

use super::{ActionDef, BinOp, ComputedDef, DslError, Expr, PatchDef, Path, Program, Schema, Scope, Type, Value};

type RawAction = (String, usize, Expr, Vec<(Path, usize, Expr)>);

/// Parses a whole program whose definitions all belong to `scope`.
pub fn parse_program(text: &str, schema: Arc<Schema>, scope: Scope) -> Result<Program, DslError> {
    let mut program = Program::empty(schema);
    program.extend(scope, text)?;
    Ok(program)
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    Real(f64),
    Str(String),
    Op(&'static str),
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
}

const OPS: [&str; 16] = ["<-", "==", "!=", ">=", "<=", ">", "<", "=", "+", "-", "*", "/", "(", ")", ",", ":"];

fn syntax(line: usize, message: impl Into<String>) -> DslError {
    DslError::Syntax { line, message: message.into() }
}

fn tokenize(text: &str, line: usize, out: &mut Vec<Token>) -> Result<(), DslError> {
    let bytes = text.as_bytes();
    let mut i = 0;
    'outer: while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_' || bytes[i] == b'.') {
                i += 1;
            }
            let word = &text[start..i];
            if word.ends_with('.') || word.contains("..") || word.matches('.').count() > 1 {
                return Err(syntax(line, format!("malformed name `{word}`")));
            }
            out.push(Token { tok: Tok::Ident(word.to_string()), line });
            continue;
        }
        if c.is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            let mut real = false;
            if i + 1 < bytes.len() && bytes[i] == b'.' && bytes[i + 1].is_ascii_digit() {
                real = true;
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
            let lit = &text[start..i];
            let tok = if real {
                Tok::Real(lit.parse().map_err(|_| syntax(line, format!("bad number `{lit}`")))?)
            } else {
                Tok::Int(lit.parse().map_err(|_| syntax(line, format!("integer `{lit}` out of range")))?)
            };
            out.push(Token { tok, line });
            continue;
        }
        if c == '"' {
            let start = i + 1;
            let Some(len) = text[start..].find('"') else {
                return Err(syntax(line, "unterminated string"));
            };
            out.push(Token { tok: Tok::Str(text[start..start + len].to_string()), line });
            i = start + len + 1;
            continue;
        }
        for op in OPS {
            if text[i..].starts_with(op) {
                out.push(Token { tok: Tok::Op(op), line });
                i += op.len();
                continue 'outer;
            }
        }
        return Err(syntax(line, format!("unexpected character `{c}`")));
    }
    Ok(())
}

/// Raw statement before name resolution.
enum Stmt {
    Computed { name: String, line: usize, tokens: Vec<Token> },
    Action { name: String, line: usize, guard: Vec<Token>, patches: Vec<(String, usize, Vec<Token>)> },
}

fn is_name(word: &str) -> bool {
    let mut chars = word.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn split_statements(text: &str) -> Result<Vec<Stmt>, DslError> {
    let mut stmts: Vec<Stmt> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let indented = raw.starts_with(' ') || raw.starts_with('\t');
        let body = raw.trim();
        if !indented {
            if let Some(rest) = body.strip_prefix("computed ") {
                let Some((name, expr)) = rest.split_once('=') else {
                    return Err(syntax(line, "expected `computed <name> = <expr>`"));
                };
                let name = name.trim();
                if !is_name(name) {
                    return Err(syntax(line, format!("bad name `{name}`")));
                }
                let mut tokens = Vec::new();
                tokenize(expr, line, &mut tokens)?;
                stmts.push(Stmt::Computed { name: name.to_string(), line, tokens });
            } else if let Some(rest) = body.strip_prefix("action ") {
                let Some((name, guard)) = rest.split_once(" available when ") else {
                    return Err(syntax(line, "expected `action <name> available when <expr>:`"));
                };
                let Some(guard) = guard.trim_end().strip_suffix(':') else {
                    return Err(syntax(line, "action header must end with `:`"));
                };
                let name = name.trim();
                if !is_name(name) {
                    return Err(syntax(line, format!("bad name `{name}`")));
                }
                let mut tokens = Vec::new();
                tokenize(guard, line, &mut tokens)?;
                stmts.push(Stmt::Action { name: name.to_string(), line, guard: tokens, patches: Vec::new() });
            } else {
                return Err(syntax(line, "expected `computed` or `action`"));
            }
            continue;
        }
        match stmts.last_mut() {
            Some(Stmt::Computed { tokens, .. }) => tokenize(body, line, tokens)?,
            Some(Stmt::Action { patches, .. }) => {
                let Some(rest) = body.strip_prefix("patch ") else {
                    return Err(syntax(line, "expected `patch <path> <- <expr>`"));
                };
                let Some((path, expr)) = rest.split_once("<-") else {
                    return Err(syntax(line, "expected `<-` in patch"));
                };
                let path = path.trim();
                let valid = match path.split_once('.') {
                    Some((f, k)) => is_name(f) && is_name(k),
                    None => is_name(path),
                };
                if !valid {
                    return Err(syntax(line, format!("bad patch target `{path}`")));
                }
                let mut tokens = Vec::new();
                tokenize(expr, line, &mut tokens)?;
                patches.push((path.to_string(), line, tokens));
            }
            None => return Err(syntax(line, "indented line outside a definition")),
        }
    }
    for stmt in &stmts {
        if let Stmt::Action { patches, line, .. } = stmt {
            if patches.is_empty() {
                return Err(syntax(*line, "action has no patches"));
            }
        }
    }
    Ok(stmts)
}

/// Unresolved expression tree.
#[derive(Debug, Clone)]
enum Ast {
    Lit(Value),
    Name(String, usize),
    Not(Box<Ast>),
    Neg(Box<Ast>),
    Bin(BinOp, Box<Ast>, Box<Ast>),
    Min(Vec<Ast>),
    Max(Vec<Ast>),
}

struct Parser<'t> {
    tokens: &'t [Token],
    pos: usize,
    line: usize,
}

impl<'t> Parser<'t> {
    fn parse(tokens: &'t [Token], line: usize) -> Result<Ast, DslError> {
        let mut p = Parser { tokens, pos: 0, line };
        let ast = p.or()?;
        if let Some(t) = p.tokens.get(p.pos) {
            return Err(syntax(t.line, format!("unexpected `{}`", describe(&t.tok))));
        }
        Ok(ast)
    }

    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|t| &t.tok)
    }

    fn here(&self) -> usize {
        self.tokens.get(self.pos).or(self.tokens.last()).map_or(self.line, |t| t.line)
    }

    fn eat_word(&mut self, word: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Ident(w)) if w == word) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn eat_op(&mut self, op: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Op(o)) if *o == op) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_op(&mut self, op: &str) -> Result<(), DslError> {
        if self.eat_op(op) {
            Ok(())
        } else {
            Err(syntax(self.here(), format!("expected `{op}`")))
        }
    }

    fn or(&mut self) -> Result<Ast, DslError> {
        let mut lhs = self.and()?;
        while self.eat_word("or") {
            lhs = Ast::Bin(BinOp::Or, Box::new(lhs), Box::new(self.and()?));
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<Ast, DslError> {
        let mut lhs = self.not()?;
        while self.eat_word("and") {
            lhs = Ast::Bin(BinOp::And, Box::new(lhs), Box::new(self.not()?));
        }
        Ok(lhs)
    }

    fn not(&mut self) -> Result<Ast, DslError> {
        if self.eat_word("not") {
            Ok(Ast::Not(Box::new(self.not()?)))
        } else {
            self.comparison()
        }
    }

    fn comparison(&mut self) -> Result<Ast, DslError> {
        let lhs = self.additive()?;
        let op = match self.peek() {
            Some(Tok::Op("==")) => BinOp::Eq,
            Some(Tok::Op("!=")) => BinOp::Ne,
            Some(Tok::Op("<")) => BinOp::Lt,
            Some(Tok::Op("<=")) => BinOp::Le,
            Some(Tok::Op(">")) => BinOp::Gt,
            Some(Tok::Op(">=")) => BinOp::Ge,
            _ => return Ok(lhs),
        };
        self.pos += 1;
        let rhs = self.additive()?;
        if matches!(self.peek(), Some(Tok::Op("==" | "!=" | "<" | "<=" | ">" | ">="))) {
            return Err(syntax(self.here(), "comparisons do not chain"));
        }
        Ok(Ast::Bin(op, Box::new(lhs), Box::new(rhs)))
    }

    fn additive(&mut self) -> Result<Ast, DslError> {
        let mut lhs = self.multiplicative()?;
        loop {
            let op = if self.eat_op("+") {
                BinOp::Add
            } else if self.eat_op("-") {
                BinOp::Sub
            } else {
                return Ok(lhs);
            };
            lhs = Ast::Bin(op, Box::new(lhs), Box::new(self.multiplicative()?));
        }
    }

    fn multiplicative(&mut self) -> Result<Ast, DslError> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.eat_op("*") {
                BinOp::Mul
            } else if self.eat_op("/") {
                BinOp::Div
            } else {
                return Ok(lhs);
            };
            lhs = Ast::Bin(op, Box::new(lhs), Box::new(self.unary()?));
        }
    }

    fn unary(&mut self) -> Result<Ast, DslError> {
        if self.eat_op("-") {
            Ok(Ast::Neg(Box::new(self.unary()?)))
        } else {
            self.primary()
        }
    }

    fn primary(&mut self) -> Result<Ast, DslError> {
        let line = self.here();
        let Some(tok) = self.peek().cloned() else {
            return Err(syntax(line, "expression expected"));
        };
        self.pos += 1;
        match tok {
            Tok::Int(i) => Ok(Ast::Lit(Value::Int(i))),
            Tok::Real(x) => Ok(Ast::Lit(Value::Real(x))),
            Tok::Str(s) => Ok(Ast::Lit(Value::Str(s))),
            Tok::Op("(") => {
                let inner = self.or()?;
                self.expect_op(")")?;
                Ok(inner)
            }
            Tok::Ident(w) => match w.as_str() {
                "true" => Ok(Ast::Lit(Value::Bool(true))),
                "false" => Ok(Ast::Lit(Value::Bool(false))),
                "min" | "max" => {
                    self.expect_op("(")?;
                    let mut args = vec![self.or()?];
                    while self.eat_op(",") {
                        args.push(self.or()?);
                    }
                    self.expect_op(")")?;
                    if args.len() < 2 {
                        return Err(syntax(line, format!("{w} needs at least two arguments")));
                    }
                    Ok(if w == "min" { Ast::Min(args) } else { Ast::Max(args) })
                }
                "and" | "or" | "not" | "computed" | "action" | "patch" | "available" | "when" => {
                    Err(syntax(line, format!("unexpected keyword `{w}`")))
                }
                _ => Ok(Ast::Name(w, line)),
            },
            other => Err(syntax(line, format!("unexpected `{}`", describe(&other)))),
        }
    }
}

fn describe(tok: &Tok) -> String {
    match tok {
        Tok::Ident(w) => w.clone(),
        Tok::Int(i) => i.to_string(),
        Tok::Real(x) => x.to_string(),
        Tok::Str(s) => format!("\"{s}\""),
        Tok::Op(o) => o.to_string(),
    }
}

/// Name-resolution context shared by all definitions of one program.
struct Resolver<'p> {
    schema: &'p Schema,
    /// computed name -> (index, scope)
    computed: HashMap<String, (usize, Scope)>,
    scope: Scope,
}

impl Resolver<'_> {
    fn resolve(&self, ast: &Ast, deps: &mut Vec<usize>) -> Result<Expr, DslError> {
        Ok(match ast {
            Ast::Lit(v) => Expr::Literal(v.clone()),
            Ast::Name(name, line) => {
                if let Some((field, key)) = name.split_once('.') {
                    let index = self
                        .schema
                        .index_of(field)
                        .ok_or_else(|| DslError::UnknownReference { name: field.to_string(), line: *line })?;
                    Expr::MapEntry(index, key.to_string())
                } else if let Some(&(index, scope)) = self.computed.get(name) {
                    if scope > self.scope {
                        return Err(DslError::ScopeViolation {
                            line: *line,
                            name: name.clone(),
                            scope: self.scope,
                            other: scope,
                        });
                    }
                    deps.push(index);
                    Expr::Computed(index)
                } else if let Some(index) = self.schema.index_of(name) {
                    Expr::Field(index)
                } else {
                    return Err(DslError::UnknownReference { name: name.clone(), line: *line });
                }
            }
            Ast::Not(e) => Expr::Not(Box::new(self.resolve(e, deps)?)),
            Ast::Neg(e) => Expr::Neg(Box::new(self.resolve(e, deps)?)),
            Ast::Bin(op, a, b) => Expr::Binary(*op, Box::new(self.resolve(a, deps)?), Box::new(self.resolve(b, deps)?)),
            Ast::Min(args) => Expr::Min(args.iter().map(|a| self.resolve(a, deps)).collect::<Result<_, _>>()?),
            Ast::Max(args) => Expr::Max(args.iter().map(|a| self.resolve(a, deps)).collect::<Result<_, _>>()?),
        })
    }
}

fn mismatch(line: usize, message: String) -> DslError {
    DslError::TypeMismatch { line, message }
}

/// Static type of an expression, given the types of computed defs.
fn type_of(expr: &Expr, schema: &Schema, computed: &[Option<Type>], line: usize) -> Result<Type, DslError> {
    let field_type = |i: usize| schema.fields[i].1;
    Ok(match expr {
        Expr::Literal(v) => v.type_of(),
        Expr::Field(i) => field_type(*i),
        Expr::MapEntry(i, _) => {
            if field_type(*i) != Type::RealMap {
                return Err(mismatch(line, format!("`{}` is {}, not a real-map", schema.fields[*i].0, field_type(*i))));
            }
            Type::Real
        }
        Expr::Computed(i) => computed[*i].expect("dependencies typed first"),
        Expr::Not(e) => {
            let t = type_of(e, schema, computed, line)?;
            if t != Type::Bool {
                return Err(mismatch(line, format!("`not` needs bool, found {t}")));
            }
            Type::Bool
        }
        Expr::Neg(e) => {
            let t = type_of(e, schema, computed, line)?;
            if !t.is_numeric() {
                return Err(mismatch(line, format!("cannot negate {t}")));
            }
            t
        }
        Expr::Binary(op, a, b) => {
            let (ta, tb) = (type_of(a, schema, computed, line)?, type_of(b, schema, computed, line)?);
            match op {
                BinOp::And | BinOp::Or => {
                    if ta != Type::Bool || tb != Type::Bool {
                        return Err(mismatch(line, format!("`{op}` needs bool operands, found {ta} and {tb}")));
                    }
                    Type::Bool
                }
                BinOp::Eq | BinOp::Ne => {
                    let ok = (ta.is_numeric() && tb.is_numeric()) || (ta == tb && ta != Type::RealMap);
                    if !ok {
                        return Err(mismatch(line, format!("cannot compare {ta} with {tb}")));
                    }
                    Type::Bool
                }
                BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => {
                    if !ta.is_numeric() || !tb.is_numeric() {
                        return Err(mismatch(line, format!("`{op}` needs numbers, found {ta} and {tb}")));
                    }
                    Type::Bool
                }
                BinOp::Add | BinOp::Sub | BinOp::Mul => {
                    if !ta.is_numeric() || !tb.is_numeric() {
                        return Err(mismatch(line, format!("`{op}` needs numbers, found {ta} and {tb}")));
                    }
                    if ta == Type::Int && tb == Type::Int {
                        Type::Int
                    } else {
                        Type::Real
                    }
                }
                BinOp::Div => {
                    if !ta.is_numeric() || !tb.is_numeric() {
                        return Err(mismatch(line, format!("`/` needs numbers, found {ta} and {tb}")));
                    }
                    if let Expr::Literal(v) = &**b {
                        if v.as_real() == Some(0.0) {
                            return Err(DslError::DivisionByZero);
                        }
                    }
                    Type::Real
                }
            }
        }
        Expr::Min(args) | Expr::Max(args) => {
            let mut all_int = true;
            for a in args {
                let t = type_of(a, schema, computed, line)?;
                if !t.is_numeric() {
                    return Err(mismatch(line, format!("min/max needs numbers, found {t}")));
                }
                all_int &= t == Type::Int;
            }
            if all_int {
                Type::Int
            } else {
                Type::Real
            }
        }
    })
}

/// Returns the first cycle found among `deps` (index -> dependencies), as
/// a closed path of indices.
fn find_cycle(deps: &[Vec<usize>]) -> Option<Vec<usize>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    fn visit(n: usize, deps: &[Vec<usize>], marks: &mut [Mark], stack: &mut Vec<usize>) -> Option<Vec<usize>> {
        marks[n] = Mark::Active;
        stack.push(n);
        for &d in &deps[n] {
            match marks[d] {
                Mark::Active => {
                    let start = stack.iter().position(|&s| s == d).expect("on stack");
                    let mut cycle = stack[start..].to_vec();
                    cycle.push(d);
                    return Some(cycle);
                }
                Mark::New => {
                    if let Some(c) = visit(d, deps, marks, stack) {
                        return Some(c);
                    }
                }
                Mark::Done => {}
            }
        }
        stack.pop();
        marks[n] = Mark::Done;
        None
    }
    let mut marks = vec![Mark::New; deps.len()];
    for n in 0..deps.len() {
        if marks[n] == Mark::New {
            let mut stack = Vec::new();
            if let Some(c) = visit(n, deps, &mut marks, &mut stack) {
                return Some(c);
            }
        }
    }
    None
}

fn topo_order(deps: &[Vec<usize>]) -> Vec<usize> {
    fn visit(n: usize, deps: &[Vec<usize>], seen: &mut [bool], out: &mut Vec<usize>) {
        if seen[n] {
            return;
        }
        seen[n] = true;
        for &d in &deps[n] {
            visit(d, deps, seen, out);
        }
        out.push(n);
    }
    let mut seen = vec![false; deps.len()];
    let mut out = Vec::with_capacity(deps.len());
    for n in 0..deps.len() {
        visit(n, deps, &mut seen, &mut out);
    }
    out
}

/// Returns `base` plus the definitions in `text`, all tagged `scope`.
pub(super) fn extend(base: &Program, scope: Scope, text: &str) -> Result<Program, DslError> {
    let stmts = split_statements(text)?;
    let schema = &*base.schema;

    let mut names: HashMap<String, (usize, Scope)> = base
        .computed
        .iter()
        .enumerate()
        .map(|(i, d)| (d.name.clone(), (i, d.scope)))
        .collect();
    let mut next_index = base.computed.len();
    for stmt in &stmts {
        let (name, line) = match stmt {
            Stmt::Computed { name, line, .. } | Stmt::Action { name, line, .. } => (name, *line),
        };
        let clash = names.contains_key(name)
            || schema.index_of(name).is_some()
            || base.actions.iter().any(|a| &a.name == name)
            || stmts.iter().filter(|s| matches!(s, Stmt::Action { name: n, .. } if n == name)).count() > 1;
        if clash {
            return Err(DslError::Duplicate { name: name.clone(), line });
        }
        if let Stmt::Computed { name, .. } = stmt {
            names.insert(name.clone(), (next_index, scope));
            next_index += 1;
        }
    }
    let resolver = Resolver { schema, computed: names, scope };

    let mut computed = base.computed.clone();
    let mut actions = base.actions.clone();
    let mut deps: Vec<Vec<usize>> = base.computed.iter().map(|d| expr_deps(&d.expr)).collect();
    let mut pending = Vec::new();
    let mut raw_actions: Vec<RawAction> = Vec::new();
    for stmt in &stmts {
        match stmt {
            Stmt::Computed { name, line, tokens } => {
                let ast = Parser::parse(tokens, *line)?;
                let mut d = Vec::new();
                let expr = resolver.resolve(&ast, &mut d)?;
                deps.push(d);
                pending.push(computed.len());
                computed.push(ComputedDef { name: name.clone(), scope, ty: Type::Bool, expr, line: *line });
            }
            Stmt::Action { name, line, guard, patches } => {
                let guard = resolver.resolve(&Parser::parse(guard, *line)?, &mut Vec::new())?;
                let patches = patches
                    .iter()
                    .map(|(path, pline, tokens)| {
                        let value = resolver.resolve(&Parser::parse(tokens, *pline)?, &mut Vec::new())?;
                        Ok((Path::parse(path), *pline, value))
                    })
                    .collect::<Result<Vec<_>, DslError>>()?;
                raw_actions.push((name.clone(), *line, guard, patches));
            }
        }
    }

    if let Some(cycle) = find_cycle(&deps) {
        return Err(DslError::CyclicDependency(cycle.into_iter().map(|i| computed[i].name.clone()).collect()));
    }

    let mut types: Vec<Option<Type>> = computed.iter().map(|d| Some(d.ty)).collect();
    for &i in &pending {
        types[i] = None;
    }
    for i in topo_order(&deps) {
        if types[i].is_none() {
            types[i] = Some(type_of(&computed[i].expr, schema, &types, computed[i].line)?);
        }
    }
    for i in pending {
        computed[i].ty = types[i].expect("typed");
    }

    for (name, line, guard, patches) in raw_actions {
        let t = type_of(&guard, schema, &types, line)?;
        if t != Type::Bool {
            return Err(mismatch(line, format!("guard of `{name}` is {t}, not bool")));
        }
        let mut checked = Vec::with_capacity(patches.len());
        for (path, pline, value) in patches {
            let field_type = schema
                .type_of(&path.field)
                .ok_or_else(|| DslError::UnknownReference { name: path.field.clone(), line: pline })?;
            let slot = match (&path.key, field_type) {
                (None, t) => t,
                (Some(_), Type::RealMap) => Type::Real,
                (Some(_), t) => return Err(mismatch(pline, format!("`{}` is {t}, not a real-map", path.field))),
            };
            let vt = type_of(&value, schema, &types, pline)?;
            if !slot.accepts(vt) {
                return Err(mismatch(pline, format!("cannot patch `{path}` ({slot}) with {vt}")));
            }
            checked.push(PatchDef { path, value });
        }
        actions.push(ActionDef { name, scope, guard, patches: checked, line });
    }
    Ok(Program { schema: Arc::clone(&base.schema), computed, actions })
}

fn expr_deps(expr: &Expr) -> Vec<usize> {
    let mut out = Vec::new();
    fn walk(e: &Expr, out: &mut Vec<usize>) {
        match e {
            Expr::Computed(i) => out.push(*i),
            Expr::Not(x) | Expr::Neg(x) => walk(x, out),
            Expr::Binary(_, a, b) => {
                walk(a, out);
                walk(b, out);
            }
            Expr::Min(v) | Expr::Max(v) => v.iter().for_each(|x| walk(x, out)),
            Expr::Literal(_) | Expr::Field(_) | Expr::MapEntry(..) => {}
        }
    }
    walk(expr, &mut out);
    out
}
