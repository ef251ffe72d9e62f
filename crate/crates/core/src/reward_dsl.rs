//! Sandboxed expression language for reward candidates. Programs are parsed
//! into a typed tree, checked against size limits, and evaluated against a
//! [`RewardContext`]; nothing outside the context is reachable.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rewards::{argmax, argmin, var_q, RewardContext, RewardError, RewardFn, RiskRewardParams};

pub const MAX_DEPTH: usize = 32;
pub const MAX_NODES: usize = 512;
pub const MAX_SOURCE_BYTES: usize = 16 * 1024;

/// Grammar reference, shipped verbatim to the reward designer.
pub const GRAMMAR: &str = include_str!("../docs/reward_dsl.md");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSpan {
    pub start: usize,
    pub end: usize,
}

impl fmt::Display for SourceSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DslError {
    #[error("syntax error at {span}: {msg}")]
    Syntax { span: SourceSpan, msg: String },
    #[error("type error at {span}: {msg}")]
    Type { span: SourceSpan, msg: String },
    #[error("unknown identifier `{name}` at {span}")]
    Unknown { name: String, span: SourceSpan },
    #[error("limit exceeded: {0}")]
    Limit(String),
    #[error("evaluation error: {0}")]
    Eval(String),
}

impl DslError {
    pub fn span(&self) -> Option<SourceSpan> {
        match self {
            DslError::Syntax { span, .. } | DslError::Type { span, .. } | DslError::Unknown { span, .. } => {
                Some(*span)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ty {
    Scalar,
    Vector,
    Bool,
}

impl fmt::Display for Ty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ty::Scalar => "scalar",
            Ty::Vector => "vector",
            Ty::Bool => "bool",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feature {
    Backlog,
    NextBacklog,
    Transmitted,
    Rate,
    Dist,
    NextDist,
    DeltaDist,
    SlotLen,
    Slot,
    NumUsers,
    InitBacklog,
    InitMaxBacklog,
    InitTotalBacklog,
    AreaDiag,
}

impl Feature {
    pub const ALL: [Feature; 14] = [
        Feature::Backlog,
        Feature::NextBacklog,
        Feature::Transmitted,
        Feature::Rate,
        Feature::Dist,
        Feature::NextDist,
        Feature::DeltaDist,
        Feature::SlotLen,
        Feature::Slot,
        Feature::NumUsers,
        Feature::InitBacklog,
        Feature::InitMaxBacklog,
        Feature::InitTotalBacklog,
        Feature::AreaDiag,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Feature::Backlog => "backlog",
            Feature::NextBacklog => "next_backlog",
            Feature::Transmitted => "transmitted",
            Feature::Rate => "rate",
            Feature::Dist => "dist",
            Feature::NextDist => "next_dist",
            Feature::DeltaDist => "delta_dist",
            Feature::SlotLen => "slot_len",
            Feature::Slot => "slot",
            Feature::NumUsers => "num_users",
            Feature::InitBacklog => "init_backlog",
            Feature::InitMaxBacklog => "init_max_backlog",
            Feature::InitTotalBacklog => "init_total_backlog",
            Feature::AreaDiag => "area_diag",
        }
    }

    pub fn from_name(s: &str) -> Option<Feature> {
        Feature::ALL.into_iter().find(|f| f.name() == s)
    }

    pub fn ty(self) -> Ty {
        match self {
            Feature::Backlog
            | Feature::NextBacklog
            | Feature::Transmitted
            | Feature::Rate
            | Feature::Dist
            | Feature::NextDist
            | Feature::DeltaDist
            | Feature::InitBacklog => Ty::Vector,
            _ => Ty::Scalar,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sum,
    Mean,
    Max,
    Min,
    ArgMax,
    ArgMin,
    VarQ,
    DistTo,
    NextDistTo,
    DeltaDistTo,
    Clamp,
    Abs,
    Sqrt,
    Log,
    Exp,
    Indicator,
    Select,
}

impl Func {
    const ALL: [Func; 17] = [
        Func::Sum,
        Func::Mean,
        Func::Max,
        Func::Min,
        Func::ArgMax,
        Func::ArgMin,
        Func::VarQ,
        Func::DistTo,
        Func::NextDistTo,
        Func::DeltaDistTo,
        Func::Clamp,
        Func::Abs,
        Func::Sqrt,
        Func::Log,
        Func::Exp,
        Func::Indicator,
        Func::Select,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Func::Sum => "sum",
            Func::Mean => "mean",
            Func::Max => "max",
            Func::Min => "min",
            Func::ArgMax => "argmax",
            Func::ArgMin => "argmin",
            Func::VarQ => "var_q",
            Func::DistTo => "dist_to",
            Func::NextDistTo => "next_dist_to",
            Func::DeltaDistTo => "delta_dist_to",
            Func::Clamp => "clamp",
            Func::Abs => "abs",
            Func::Sqrt => "sqrt",
            Func::Log => "log",
            Func::Exp => "exp",
            Func::Indicator => "indicator",
            Func::Select => "select",
        }
    }

    pub fn from_name(s: &str) -> Option<Func> {
        Func::ALL.into_iter().find(|f| f.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
    And,
    Or,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::And => "&&",
            BinOp::Or => "||",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Feature(Feature),
    /// Reference to the i-th `let` binding.
    Var(usize),
    Neg(Box<Expr>),
    Not(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
    Index(Box<Expr>, Box<Expr>),
}

impl Expr {
    fn children(&self) -> Vec<&Expr> {
        match self {
            Expr::Num(_) | Expr::Feature(_) | Expr::Var(_) => vec![],
            Expr::Neg(a) | Expr::Not(a) => vec![a],
            Expr::Bin(_, a, b) | Expr::Index(a, b) => vec![a, b],
            Expr::Call(_, args) => args.iter().collect(),
        }
    }

    pub fn node_count(&self) -> usize {
        1 + self.children().into_iter().map(Expr::node_count).sum::<usize>()
    }

    pub fn depth(&self) -> usize {
        1 + self.children().into_iter().map(Expr::depth).max().unwrap_or(0)
    }
}

/// A parsed, type-checked reward program.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardProgram {
    pub lets: Vec<(String, Expr)>,
    pub body: Expr,
}

impl RewardProgram {
    pub fn node_count(&self) -> usize {
        self.lets.iter().map(|(_, e)| e.node_count()).sum::<usize>() + self.body.node_count()
    }

    pub fn evaluate(&self, ctx: &RewardContext) -> Result<f64, DslError> {
        evaluate(self, ctx)
    }

    pub fn to_canonical(&self) -> String {
        print_canonical(self)
    }
}

impl std::str::FromStr for RewardProgram {
    type Err = DslError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse(s)
    }
}

// ---------------------------------------------------------------------------
// Lexer

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Let,
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Semi,
    Assign,
    Plus,
    Minus,
    Star,
    Slash,
    Lt,
    Le,
    Gt,
    Ge,
    EqEq,
    Ne,
    AndAnd,
    OrOr,
    Bang,
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(x) => format!("number {x}"),
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Let => "`let`".into(),
            Tok::Eof => "end of input".into(),
            other => format!("`{}`", other.text()),
        }
    }

    fn text(&self) -> &'static str {
        match self {
            Tok::LParen => "(",
            Tok::RParen => ")",
            Tok::LBracket => "[",
            Tok::RBracket => "]",
            Tok::Comma => ",",
            Tok::Semi => ";",
            Tok::Assign => "=",
            Tok::Plus => "+",
            Tok::Minus => "-",
            Tok::Star => "*",
            Tok::Slash => "/",
            Tok::Lt => "<",
            Tok::Le => "<=",
            Tok::Gt => ">",
            Tok::Ge => ">=",
            Tok::EqEq => "==",
            Tok::Ne => "!=",
            Tok::AndAnd => "&&",
            Tok::OrOr => "||",
            Tok::Bang => "!",
            _ => "",
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    span: SourceSpan,
}

fn syntax(start: usize, end: usize, msg: impl Into<String>) -> DslError {
    DslError::Syntax {
        span: SourceSpan { start, end },
        msg: msg.into(),
    }
}

fn lex(src: &str) -> Result<Vec<Token>, DslError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if c == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        let tok = if c.is_ascii_digit() || (c == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) {
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'.' {
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                } else {
                    return Err(syntax(start, j, "malformed exponent in number"));
                }
            }
            let text = &src[start..i];
            let v: f64 = text.parse().map_err(|_| syntax(start, i, format!("bad number `{text}`")))?;
            if !v.is_finite() {
                return Err(syntax(start, i, format!("number `{text}` is not finite")));
            }
            Tok::Num(v)
        } else if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            match &src[start..i] {
                "let" => Tok::Let,
                s => Tok::Ident(s.to_string()),
            }
        } else {
            let two = bytes.get(i + 1).copied();
            let (t, len) = match (c, two) {
                (b'<', Some(b'=')) => (Tok::Le, 2),
                (b'>', Some(b'=')) => (Tok::Ge, 2),
                (b'=', Some(b'=')) => (Tok::EqEq, 2),
                (b'!', Some(b'=')) => (Tok::Ne, 2),
                (b'&', Some(b'&')) => (Tok::AndAnd, 2),
                (b'|', Some(b'|')) => (Tok::OrOr, 2),
                (b'(', _) => (Tok::LParen, 1),
                (b')', _) => (Tok::RParen, 1),
                (b'[', _) => (Tok::LBracket, 1),
                (b']', _) => (Tok::RBracket, 1),
                (b',', _) => (Tok::Comma, 1),
                (b';', _) => (Tok::Semi, 1),
                (b'=', _) => (Tok::Assign, 1),
                (b'+', _) => (Tok::Plus, 1),
                (b'-', _) => (Tok::Minus, 1),
                (b'*', _) => (Tok::Star, 1),
                (b'/', _) => (Tok::Slash, 1),
                (b'<', _) => (Tok::Lt, 1),
                (b'>', _) => (Tok::Gt, 1),
                (b'!', _) => (Tok::Bang, 1),
                _ => {
                    let ch = src[i..].chars().next().unwrap_or('?');
                    return Err(syntax(i, i + ch.len_utf8(), format!("unexpected character `{ch}`")));
                }
            };
            i += len;
            t
        };
        out.push(Token {
            tok,
            span: SourceSpan { start, end: i },
        });
    }
    out.push(Token {
        tok: Tok::Eof,
        span: SourceSpan {
            start: src.len(),
            end: src.len(),
        },
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parser and type checker

struct Typed {
    expr: Expr,
    ty: Ty,
    span: SourceSpan,
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    lets: Vec<(String, Ty)>,
    nesting: usize,
    nodes: usize,
}

fn join(a: SourceSpan, b: SourceSpan) -> SourceSpan {
    SourceSpan {
        start: a.start.min(b.start),
        end: a.end.max(b.end),
    }
}

fn type_err(span: SourceSpan, msg: impl Into<String>) -> DslError {
    DslError::Type { span, msg: msg.into() }
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<Token, DslError> {
        let t = self.peek().clone();
        if t.tok == want {
            Ok(self.bump())
        } else {
            Err(syntax(
                t.span.start,
                t.span.end,
                format!("expected {what}, found {}", t.tok.describe()),
            ))
        }
    }

    fn node(&mut self) -> Result<(), DslError> {
        self.nodes += 1;
        if self.nodes > MAX_NODES {
            return Err(DslError::Limit(format!("more than {MAX_NODES} nodes")));
        }
        Ok(())
    }

    fn enter(&mut self) -> Result<(), DslError> {
        self.nesting += 1;
        if self.nesting > 2 * MAX_DEPTH {
            return Err(DslError::Limit(format!("nesting deeper than {MAX_DEPTH}")));
        }
        Ok(())
    }

    fn program(&mut self) -> Result<RewardProgram, DslError> {
        let mut lets = Vec::new();
        while self.peek().tok == Tok::Let {
            self.bump();
            let name_tok = self.bump();
            let Tok::Ident(name) = name_tok.tok else {
                return Err(syntax(
                    name_tok.span.start,
                    name_tok.span.end,
                    format!("expected binding name, found {}", name_tok.tok.describe()),
                ));
            };
            if Feature::from_name(&name).is_some()
                || Func::from_name(&name).is_some()
                || self.lets.iter().any(|(n, _)| *n == name)
            {
                return Err(syntax(
                    name_tok.span.start,
                    name_tok.span.end,
                    format!("`{name}` is already defined"),
                ));
            }
            self.expect(Tok::Assign, "`=`")?;
            let value = self.expr()?;
            self.expect(Tok::Semi, "`;`")?;
            self.lets.push((name.clone(), value.ty));
            lets.push((name, value.expr));
        }
        let body = self.expr()?;
        let end = self.peek().clone();
        if end.tok != Tok::Eof {
            return Err(syntax(
                end.span.start,
                end.span.end,
                format!("expected an operator or end of input, found {}", end.tok.describe()),
            ));
        }
        if body.ty != Ty::Scalar {
            return Err(type_err(body.span, format!("reward must be a scalar, found {}", body.ty)));
        }
        Ok(RewardProgram { lets, body: body.expr })
    }

    fn expr(&mut self) -> Result<Typed, DslError> {
        self.enter()?;
        let r = self.or();
        self.nesting -= 1;
        r
    }

    fn logic(&mut self, op: BinOp, tok: Tok, next: fn(&mut Self) -> Result<Typed, DslError>) -> Result<Typed, DslError> {
        let mut lhs = next(self)?;
        while self.peek().tok == tok {
            self.bump();
            let rhs = next(self)?;
            self.node()?;
            for side in [&lhs, &rhs] {
                if side.ty != Ty::Bool {
                    return Err(type_err(side.span, format!("`{}` needs bool operands, found {}", op.symbol(), side.ty)));
                }
            }
            let span = join(lhs.span, rhs.span);
            lhs = Typed {
                expr: Expr::Bin(op, Box::new(lhs.expr), Box::new(rhs.expr)),
                ty: Ty::Bool,
                span,
            };
        }
        Ok(lhs)
    }

    fn or(&mut self) -> Result<Typed, DslError> {
        self.logic(BinOp::Or, Tok::OrOr, Self::and)
    }

    fn and(&mut self) -> Result<Typed, DslError> {
        self.logic(BinOp::And, Tok::AndAnd, Self::cmp)
    }

    fn cmp(&mut self) -> Result<Typed, DslError> {
        let lhs = self.sum()?;
        let op = match self.peek().tok {
            Tok::Lt => BinOp::Lt,
            Tok::Le => BinOp::Le,
            Tok::Gt => BinOp::Gt,
            Tok::Ge => BinOp::Ge,
            Tok::EqEq => BinOp::Eq,
            Tok::Ne => BinOp::Ne,
            _ => return Ok(lhs),
        };
        self.bump();
        let rhs = self.sum()?;
        self.node()?;
        for side in [&lhs, &rhs] {
            if side.ty != Ty::Scalar {
                return Err(type_err(side.span, format!("comparison needs scalars, found {}", side.ty)));
            }
        }
        let span = join(lhs.span, rhs.span);
        Ok(Typed {
            expr: Expr::Bin(op, Box::new(lhs.expr), Box::new(rhs.expr)),
            ty: Ty::Bool,
            span,
        })
    }

    fn arith(op: BinOp, lhs: Typed, rhs: Typed) -> Result<Typed, DslError> {
        for side in [&lhs, &rhs] {
            if side.ty == Ty::Bool {
                return Err(type_err(
                    side.span,
                    format!("`{}` needs numbers, found bool (wrap it in indicator)", op.symbol()),
                ));
            }
        }
        let ty = if lhs.ty == Ty::Vector || rhs.ty == Ty::Vector {
            Ty::Vector
        } else {
            Ty::Scalar
        };
        let span = join(lhs.span, rhs.span);
        Ok(Typed {
            expr: Expr::Bin(op, Box::new(lhs.expr), Box::new(rhs.expr)),
            ty,
            span,
        })
    }

    fn sum(&mut self) -> Result<Typed, DslError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek().tok {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            self.node()?;
            lhs = Self::arith(op, lhs, rhs)?;
        }
    }

    fn term(&mut self) -> Result<Typed, DslError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek().tok {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            self.node()?;
            lhs = Self::arith(op, lhs, rhs)?;
        }
    }

    fn unary(&mut self) -> Result<Typed, DslError> {
        let t = self.peek().clone();
        match t.tok {
            Tok::Minus | Tok::Bang => {
                self.bump();
                self.enter()?;
                let inner = self.unary();
                self.nesting -= 1;
                let inner = inner?;
                self.node()?;
                let span = join(t.span, inner.span);
                if t.tok == Tok::Minus {
                    if inner.ty == Ty::Bool {
                        return Err(type_err(span, "cannot negate a bool (use `!`)"));
                    }
                    Ok(Typed {
                        expr: Expr::Neg(Box::new(inner.expr)),
                        ty: inner.ty,
                        span,
                    })
                } else {
                    if inner.ty != Ty::Bool {
                        return Err(type_err(span, format!("`!` needs a bool, found {}", inner.ty)));
                    }
                    Ok(Typed {
                        expr: Expr::Not(Box::new(inner.expr)),
                        ty: Ty::Bool,
                        span,
                    })
                }
            }
            _ => self.postfix(),
        }
    }

    fn postfix(&mut self) -> Result<Typed, DslError> {
        let mut base = self.primary()?;
        while self.peek().tok == Tok::LBracket {
            self.bump();
            let idx = self.expr()?;
            let close = self.expect(Tok::RBracket, "`]`")?;
            self.node()?;
            if base.ty != Ty::Vector {
                return Err(type_err(base.span, format!("only vectors can be indexed, found {}", base.ty)));
            }
            if idx.ty != Ty::Scalar {
                return Err(type_err(idx.span, format!("index must be a scalar, found {}", idx.ty)));
            }
            base = Typed {
                expr: Expr::Index(Box::new(base.expr), Box::new(idx.expr)),
                ty: Ty::Scalar,
                span: join(base.span, close.span),
            };
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Typed, DslError> {
        let t = self.bump();
        if !matches!(t.tok, Tok::LParen) {
            self.node()?;
        }
        match t.tok {
            Tok::Num(v) => Ok(Typed {
                expr: Expr::Num(v),
                ty: Ty::Scalar,
                span: t.span,
            }),
            Tok::LParen => {
                let inner = self.expr()?;
                let close = self.expect(Tok::RParen, "`)`")?;
                Ok(Typed {
                    span: join(t.span, close.span),
                    ..inner
                })
            }
            Tok::Ident(name) => {
                if self.peek().tok == Tok::LParen {
                    let Some(f) = Func::from_name(&name) else {
                        return Err(DslError::Unknown { name, span: t.span });
                    };
                    self.bump();
                    let mut args = Vec::new();
                    if self.peek().tok != Tok::RParen {
                        loop {
                            args.push(self.expr()?);
                            if self.peek().tok == Tok::Comma {
                                self.bump();
                            } else {
                                break;
                            }
                        }
                    }
                    let close = self.expect(Tok::RParen, "`,` or `)`")?;
                    let span = join(t.span, close.span);
                    let ty = check_call(f, &args, span)?;
                    Ok(Typed {
                        expr: Expr::Call(f, args.into_iter().map(|a| a.expr).collect()),
                        ty,
                        span,
                    })
                } else if let Some(f) = Feature::from_name(&name) {
                    Ok(Typed {
                        expr: Expr::Feature(f),
                        ty: f.ty(),
                        span: t.span,
                    })
                } else if let Some(i) = self.lets.iter().position(|(n, _)| *n == name) {
                    Ok(Typed {
                        expr: Expr::Var(i),
                        ty: self.lets[i].1,
                        span: t.span,
                    })
                } else if Func::from_name(&name).is_some() {
                    Err(syntax(t.span.start, t.span.end, format!("`{name}` is a function; call it with `(...)`")))
                } else {
                    Err(DslError::Unknown { name, span: t.span })
                }
            }
            other => Err(syntax(
                t.span.start,
                t.span.end,
                format!("expected a number, name or `(`, found {}", other.describe()),
            )),
        }
    }
}

fn check_call(f: Func, args: &[Typed], span: SourceSpan) -> Result<Ty, DslError> {
    let tys: Vec<Ty> = args.iter().map(|a| a.ty).collect();
    let bad = |expect: &str| {
        type_err(
            span,
            format!(
                "{}({}) is not valid; expected {}({expect})",
                f.name(),
                tys.iter().map(Ty::to_string).collect::<Vec<_>>().join(", "),
                f.name()
            ),
        )
    };
    use Ty::*;
    match f {
        Func::Sum | Func::Mean | Func::ArgMax | Func::ArgMin => match tys[..] {
            [Vector] => Ok(Scalar),
            _ => Err(bad("vector")),
        },
        Func::Max | Func::Min => match tys[..] {
            [Vector] => Ok(Scalar),
            [a, b] if a != Bool && b != Bool => Ok(if a == Vector || b == Vector { Vector } else { Scalar }),
            _ => Err(bad("vector | number, number")),
        },
        Func::VarQ => match tys[..] {
            [Vector, Scalar] => Ok(Scalar),
            _ => Err(bad("vector, scalar")),
        },
        Func::DistTo | Func::NextDistTo | Func::DeltaDistTo => match tys[..] {
            [Scalar] => Ok(Scalar),
            _ => Err(bad("scalar")),
        },
        Func::Clamp => match tys[..] {
            [x, Scalar, Scalar] if x != Bool => Ok(x),
            _ => Err(bad("number, scalar, scalar")),
        },
        Func::Abs | Func::Sqrt | Func::Log | Func::Exp => match tys[..] {
            [x] if x != Bool => Ok(x),
            _ => Err(bad("number")),
        },
        Func::Indicator => match tys[..] {
            [Bool] => Ok(Scalar),
            _ => Err(bad("bool")),
        },
        Func::Select => match tys[..] {
            [Bool, a, b] if a == b && a != Bool => Ok(a),
            _ => Err(bad("bool, number, number of the same type")),
        },
    }
}

/// Parse and type-check a program.
pub fn parse(src: &str) -> Result<RewardProgram, DslError> {
    if src.len() > MAX_SOURCE_BYTES {
        return Err(DslError::Limit(format!("program longer than {MAX_SOURCE_BYTES} bytes")));
    }
    let toks = lex(src)?;
    let mut p = Parser {
        toks,
        pos: 0,
        lets: Vec::new(),
        nesting: 0,
        nodes: 0,
    };
    let prog = p.program()?;
    let depth = prog
        .lets
        .iter()
        .map(|(_, e)| e.depth())
        .chain([prog.body.depth()])
        .max()
        .unwrap_or(0);
    if depth > MAX_DEPTH {
        return Err(DslError::Limit(format!("expression depth {depth} exceeds {MAX_DEPTH}")));
    }
    let nodes = prog.node_count();
    if nodes > MAX_NODES {
        return Err(DslError::Limit(format!("{nodes} nodes exceeds {MAX_NODES}")));
    }
    Ok(prog)
}

// ---------------------------------------------------------------------------
// Printer

fn print_expr(e: &Expr, lets: &[(String, Expr)], out: &mut String) {
    match e {
        Expr::Num(v) => out.push_str(&format!("{v:?}")),
        Expr::Feature(f) => out.push_str(f.name()),
        Expr::Var(i) => out.push_str(&lets[*i].0),
        Expr::Neg(a) | Expr::Not(a) => {
            out.push('(');
            out.push(if matches!(e, Expr::Neg(_)) { '-' } else { '!' });
            print_expr(a, lets, out);
            out.push(')');
        }
        Expr::Bin(op, a, b) => {
            out.push('(');
            print_expr(a, lets, out);
            out.push(' ');
            out.push_str(op.symbol());
            out.push(' ');
            print_expr(b, lets, out);
            out.push(')');
        }
        Expr::Call(f, args) => {
            out.push_str(f.name());
            out.push('(');
            for (k, a) in args.iter().enumerate() {
                if k > 0 {
                    out.push_str(", ");
                }
                print_expr(a, lets, out);
            }
            out.push(')');
        }
        Expr::Index(v, i) => {
            print_expr(v, lets, out);
            out.push('[');
            print_expr(i, lets, out);
            out.push(']');
        }
    }
}

/// Fully parenthesized text that parses back to the same tree.
pub fn print_canonical(p: &RewardProgram) -> String {
    let mut out = String::new();
    for (name, e) in &p.lets {
        out.push_str("let ");
        out.push_str(name);
        out.push_str(" = ");
        print_expr(e, &p.lets, &mut out);
        out.push_str(";\n");
    }
    print_expr(&p.body, &p.lets, &mut out);
    out
}

// ---------------------------------------------------------------------------
// Evaluator

#[derive(Debug, Clone, PartialEq)]
enum Val {
    S(f64),
    V(Vec<f64>),
    B(bool),
}

fn eval_err(msg: impl Into<String>) -> DslError {
    DslError::Eval(msg.into())
}

fn finite(x: f64) -> Result<f64, DslError> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(eval_err(format!("non-finite value {x}")))
    }
}

fn map1(v: Val, f: impl Fn(f64) -> Result<f64, DslError>) -> Result<Val, DslError> {
    match v {
        Val::S(x) => Ok(Val::S(f(x)?)),
        Val::V(xs) => Ok(Val::V(xs.into_iter().map(f).collect::<Result<_, _>>()?)),
        Val::B(_) => Err(eval_err("numeric operation on bool")),
    }
}

fn map2(a: Val, b: Val, f: impl Fn(f64, f64) -> Result<f64, DslError>) -> Result<Val, DslError> {
    match (a, b) {
        (Val::S(x), Val::S(y)) => Ok(Val::S(f(x, y)?)),
        (Val::V(xs), Val::V(ys)) => {
            if xs.len() != ys.len() {
                return Err(eval_err("vector length mismatch"));
            }
            Ok(Val::V(xs.into_iter().zip(ys).map(|(x, y)| f(x, y)).collect::<Result<_, _>>()?))
        }
        (Val::S(x), Val::V(ys)) => Ok(Val::V(ys.into_iter().map(|y| f(x, y)).collect::<Result<_, _>>()?)),
        (Val::V(xs), Val::S(y)) => Ok(Val::V(xs.into_iter().map(|x| f(x, y)).collect::<Result<_, _>>()?)),
        _ => Err(eval_err("numeric operation on bool")),
    }
}

fn scalar(v: Val) -> Result<f64, DslError> {
    match v {
        Val::S(x) => Ok(x),
        _ => Err(eval_err("expected a scalar")),
    }
}

fn vector(v: Val) -> Result<Vec<f64>, DslError> {
    match v {
        Val::V(x) => Ok(x),
        _ => Err(eval_err("expected a vector")),
    }
}

fn boolean(v: Val) -> Result<bool, DslError> {
    match v {
        Val::B(x) => Ok(x),
        _ => Err(eval_err("expected a bool")),
    }
}

fn user_index(x: f64, n: usize) -> Result<usize, DslError> {
    if x.fract() != 0.0 || x < 0.0 || x >= n as f64 {
        return Err(eval_err(format!("user index {x} out of range 0..{n}")));
    }
    Ok(x as usize)
}

fn feature(f: Feature, ctx: &RewardContext) -> Val {
    let n = ctx.num_users();
    match f {
        Feature::Backlog => Val::V(ctx.backlog.clone()),
        Feature::NextBacklog => Val::V(ctx.next_backlog.clone()),
        Feature::Transmitted => Val::V(ctx.transmitted.clone()),
        Feature::Rate => Val::V(ctx.rate.clone()),
        Feature::Dist => Val::V((0..n).map(|i| ctx.dist_to(i)).collect()),
        Feature::NextDist => Val::V((0..n).map(|i| ctx.next_dist_to(i)).collect()),
        Feature::DeltaDist => Val::V((0..n).map(|i| ctx.delta_dist_to(i)).collect()),
        Feature::SlotLen => Val::S(ctx.slot_len),
        Feature::Slot => Val::S(ctx.slot as f64),
        Feature::NumUsers => Val::S(n as f64),
        Feature::InitBacklog => Val::V(ctx.init_backlog.clone()),
        Feature::InitMaxBacklog => Val::S(ctx.init_max_backlog()),
        Feature::InitTotalBacklog => Val::S(ctx.init_total_backlog()),
        Feature::AreaDiag => Val::S(ctx.area_diag),
    }
}

fn eval(e: &Expr, ctx: &RewardContext, vars: &[Val]) -> Result<Val, DslError> {
    Ok(match e {
        Expr::Num(v) => Val::S(*v),
        Expr::Feature(f) => feature(*f, ctx),
        Expr::Var(i) => vars.get(*i).cloned().ok_or_else(|| eval_err("unbound variable"))?,
        Expr::Neg(a) => map1(eval(a, ctx, vars)?, |x| Ok(-x))?,
        Expr::Not(a) => Val::B(!boolean(eval(a, ctx, vars)?)?),
        Expr::Bin(op, a, b) => {
            let (a, b) = (eval(a, ctx, vars)?, eval(b, ctx, vars)?);
            match op {
                BinOp::Add => map2(a, b, |x, y| finite(x + y))?,
                BinOp::Sub => map2(a, b, |x, y| finite(x - y))?,
                BinOp::Mul => map2(a, b, |x, y| finite(x * y))?,
                BinOp::Div => map2(a, b, |x, y| {
                    if y == 0.0 {
                        Err(eval_err("division by zero"))
                    } else {
                        finite(x / y)
                    }
                })?,
                BinOp::And => Val::B(boolean(a)? && boolean(b)?),
                BinOp::Or => Val::B(boolean(a)? || boolean(b)?),
                cmp => {
                    let (x, y) = (scalar(a)?, scalar(b)?);
                    Val::B(match cmp {
                        BinOp::Lt => x < y,
                        BinOp::Le => x <= y,
                        BinOp::Gt => x > y,
                        BinOp::Ge => x >= y,
                        BinOp::Eq => x == y,
                        _ => x != y,
                    })
                }
            }
        }
        Expr::Index(v, i) => {
            let v = vector(eval(v, ctx, vars)?)?;
            let i = user_index(scalar(eval(i, ctx, vars)?)?, v.len())?;
            Val::S(v[i])
        }
        Expr::Call(f, args) => {
            let mut vals = args
                .iter()
                .map(|a| eval(a, ctx, vars))
                .collect::<Result<Vec<_>, _>>()?
                .into_iter();
            let mut next = || vals.next().ok_or_else(|| eval_err("missing argument"));
            match f {
                Func::Sum => Val::S(finite(vector(next()?)?.iter().sum())?),
                Func::Mean => {
                    let v = vector(next()?)?;
                    if v.is_empty() {
                        return Err(eval_err("mean of an empty vector"));
                    }
                    Val::S(finite(v.iter().sum::<f64>() / v.len() as f64)?)
                }
                Func::Max | Func::Min if args.len() == 1 => {
                    let v = vector(next()?)?;
                    if v.is_empty() {
                        return Err(eval_err("extreme of an empty vector"));
                    }
                    Val::S(if *f == Func::Max {
                        v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                    } else {
                        v.iter().copied().fold(f64::INFINITY, f64::min)
                    })
                }
                Func::Max => map2(next()?, next()?, |x, y| Ok(x.max(y)))?,
                Func::Min => map2(next()?, next()?, |x, y| Ok(x.min(y)))?,
                Func::ArgMax | Func::ArgMin => {
                    let v = vector(next()?)?;
                    if v.is_empty() {
                        return Err(eval_err("argmax of an empty vector"));
                    }
                    Val::S(if *f == Func::ArgMax { argmax(&v) } else { argmin(&v) } as f64)
                }
                Func::VarQ => {
                    let v = vector(next()?)?;
                    let q = scalar(next()?)?;
                    Val::S(var_q(&v, q).ok_or_else(|| eval_err(format!("var_q needs q in (0, 1) and a non-empty vector, got q = {q}")))?)
                }
                Func::DistTo | Func::NextDistTo | Func::DeltaDistTo => {
                    let i = user_index(scalar(next()?)?, ctx.num_users())?;
                    Val::S(match f {
                        Func::DistTo => ctx.dist_to(i),
                        Func::NextDistTo => ctx.next_dist_to(i),
                        _ => ctx.delta_dist_to(i),
                    })
                }
                Func::Clamp => {
                    let x = next()?;
                    let (lo, hi) = (scalar(next()?)?, scalar(next()?)?);
                    if lo > hi {
                        return Err(eval_err(format!("clamp bounds reversed: {lo} > {hi}")));
                    }
                    map1(x, |v| Ok(v.clamp(lo, hi)))?
                }
                Func::Abs => map1(next()?, |x| Ok(x.abs()))?,
                Func::Sqrt => map1(next()?, |x| {
                    if x < 0.0 {
                        Err(eval_err(format!("sqrt of negative value {x}")))
                    } else {
                        Ok(x.sqrt())
                    }
                })?,
                Func::Log => map1(next()?, |x| {
                    if x <= 0.0 {
                        Err(eval_err(format!("log of non-positive value {x}")))
                    } else {
                        Ok(x.ln())
                    }
                })?,
                Func::Exp => map1(next()?, |x| finite(x.exp()))?,
                Func::Indicator => Val::S(if boolean(next()?)? { 1.0 } else { 0.0 }),
                Func::Select => {
                    let c = boolean(next()?)?;
                    let (a, b) = (next()?, next()?);
                    if c {
                        a
                    } else {
                        b
                    }
                }
            }
        }
    })
}

pub fn evaluate(p: &RewardProgram, ctx: &RewardContext) -> Result<f64, DslError> {
    let mut vars = Vec::with_capacity(p.lets.len());
    for (_, e) in &p.lets {
        let v = eval(e, ctx, &vars)?;
        vars.push(v);
    }
    finite(scalar(eval(&p.body, ctx, &vars)?)?)
}

/// The risk-aware reward with each term normalized, as program text.
pub fn canonical_risk_program(q: f64) -> String {
    format!(
        "-var_q(backlog / init_backlog, {q:?}) + sum(min(backlog, rate * slot_len)) / init_total_backlog + delta_dist_to(argmax(backlog / init_backlog)) / area_diag"
    )
}

/// The risk-aware reward with explicit weights, as program text.
pub fn canonical_risk_program_raw(p: &RiskRewardParams) -> String {
    format!(
        "-var_q(backlog, {:?}) + {:?} * sum(min(backlog, rate * slot_len)) + {:?} * delta_dist_to(argmax(backlog))",
        p.q, p.mu, p.gamma_d
    )
}

/// A parsed program used as a reward.
#[derive(Debug, Clone)]
pub struct DslReward {
    pub name: String,
    pub program: Arc<RewardProgram>,
}

impl DslReward {
    pub fn parse(name: impl Into<String>, src: &str) -> Result<Self, DslError> {
        Ok(DslReward {
            name: name.into(),
            program: Arc::new(parse(src)?),
        })
    }
}

impl RewardFn for DslReward {
    fn reward(&self, ctx: &RewardContext) -> Result<f64, RewardError> {
        self.program.evaluate(ctx).map_err(|e| RewardError::Eval(e.to_string()))
    }

    fn name(&self) -> String {
        self.name.clone()
    }
}
