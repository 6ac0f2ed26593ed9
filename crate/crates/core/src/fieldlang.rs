//! Scalar expression language used for vector-field components, frame
//! fields and energy functions.
//!
//! Expressions are parsed once into an immutable tree over the coordinates
//! `x1..xn` (with the aliases `x`, `y`, `z` when `n <= 3`). Trees can be
//! evaluated in double precision and differentiated symbolically. Evaluation
//! never yields NaN or infinity: singular operations surface as
//! [`EvalDomainError`] so that callers can decide what to invalidate.
//!
//! Grammar (precedence climbing, `^` binds tighter than unary minus and only
//! takes integer exponents):
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := ('-' | '+') unary | power
//! power := atom ('^' '-'? INTEGER)?
//! atom  := NUMBER | 'pi' | VAR | FUNC '(' expr ')' | '(' expr ')'
//! ```

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown variable `{name}` at offset {offset}")]
    UnknownVariable { name: String, offset: usize },
    #[error("variable `{name}` names coordinate {index} but the dimension is {n}")]
    DimensionMismatch { name: String, index: usize, n: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalDomainError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("square root of negative value {0}")]
    NegativeSqrt(f64),
    #[error("non-finite result in {0}")]
    NonFinite(&'static str),
    #[error("point has dimension {got}, expression expects {expected}")]
    PointDimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Sqrt,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Sqrt => "sqrt",
        }
    }

    fn from_name(name: &str) -> Option<Func> {
        match name {
            "sin" => Some(Func::Sin),
            "cos" => Some(Func::Cos),
            "exp" => Some(Func::Exp),
            "sqrt" => Some(Func::Sqrt),
            _ => None,
        }
    }
}

/// Expression tree. `Var` holds a zero-based coordinate index.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Const(f64),
    Var(usize),
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, i32),
    Call(Func, Box<Node>),
}

/// A parsed scalar expression over `n` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldExpr {
    n: usize,
    root: Node,
}

impl FieldExpr {
    pub fn parse(text: &str, n: usize) -> Result<Self, ParseError> {
        parse_expression(text, n)
    }

    pub fn constant(value: f64, n: usize) -> Self {
        Self {
            n,
            root: Node::Const(value),
        }
    }

    pub fn from_node(root: Node, n: usize) -> Self {
        Self { n, root }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.root, Node::Const(c) if c == 0.0)
    }

    pub fn eval(&self, p: &[f64]) -> Result<f64, EvalDomainError> {
        eval_expr(self, p)
    }

    /// Partial derivative with respect to the zero-based coordinate `i`.
    pub fn derivative(&self, i: usize) -> FieldExpr {
        derive_expr(self, i)
    }
}

impl fmt::Display for FieldExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_node(f, &self.root)
    }
}

fn write_node(f: &mut fmt::Formatter<'_>, node: &Node) -> fmt::Result {
    match node {
        Node::Const(c) => {
            if *c < 0.0 || (*c == 0.0 && c.is_sign_negative()) {
                write!(f, "({c:?})")
            } else {
                write!(f, "{c:?}")
            }
        }
        Node::Var(i) => write!(f, "x{}", i + 1),
        Node::Neg(a) => {
            f.write_str("(-")?;
            write_atomic(f, a)?;
            f.write_str(")")
        }
        Node::Add(a, b) => write_binary(f, a, " + ", b),
        Node::Sub(a, b) => write_binary(f, a, " - ", b),
        Node::Mul(a, b) => write_binary(f, a, " * ", b),
        Node::Div(a, b) => write_binary(f, a, " / ", b),
        Node::Pow(a, k) => {
            write_atomic(f, a)?;
            write!(f, "^{k}")
        }
        Node::Call(func, a) => {
            write!(f, "{}(", func.name())?;
            write_node(f, a)?;
            f.write_str(")")
        }
    }
}

fn write_binary(f: &mut fmt::Formatter<'_>, a: &Node, op: &str, b: &Node) -> fmt::Result {
    f.write_str("(")?;
    write_node(f, a)?;
    f.write_str(op)?;
    write_node(f, b)?;
    f.write_str(")")
}

fn write_atomic(f: &mut fmt::Formatter<'_>, node: &Node) -> fmt::Result {
    match node {
        Node::Var(_) | Node::Call(..) => write_node(f, node),
        Node::Const(c) if *c >= 0.0 => write_node(f, node),
        Node::Add(..) | Node::Sub(..) | Node::Mul(..) | Node::Div(..) | Node::Neg(_) => {
            write_node(f, node)
        }
        _ => {
            f.write_str("(")?;
            write_node(f, node)?;
            f.write_str(")")
        }
    }
}

// ---------------------------------------------------------------------------
// Parsing

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Int(i64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    End,
}

fn describe(tok: &Tok) -> String {
    match tok {
        Tok::Num(v) => format!("number {v}"),
        Tok::Int(v) => format!("number {v}"),
        Tok::Ident(s) => format!("`{s}`"),
        Tok::Plus => "`+`".into(),
        Tok::Minus => "`-`".into(),
        Tok::Star => "`*`".into(),
        Tok::Slash => "`/`".into(),
        Tok::Caret => "`^`".into(),
        Tok::LParen => "`(`".into(),
        Tok::RParen => "`)`".into(),
        Tok::End => "end of input".into(),
    }
}

fn tokenize(text: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let tok = match c {
            b'+' => Tok::Plus,
            b'-' => Tok::Minus,
            b'*' => Tok::Star,
            b'/' => Tok::Slash,
            b'^' => Tok::Caret,
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b'0'..=b'9' | b'.' => {
                let mut j = i;
                let mut is_int = true;
                while j < bytes.len() && bytes[j].is_ascii_digit() {
                    j += 1;
                }
                if j < bytes.len() && bytes[j] == b'.' {
                    is_int = false;
                    j += 1;
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                }
                if j < bytes.len() && (bytes[j] == b'e' || bytes[j] == b'E') {
                    let mut k = j + 1;
                    if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
                        k += 1;
                    }
                    if k < bytes.len() && bytes[k].is_ascii_digit() {
                        is_int = false;
                        while k < bytes.len() && bytes[k].is_ascii_digit() {
                            k += 1;
                        }
                        j = k;
                    }
                }
                let lit = &text[i..j];
                i = j;
                let value: f64 = lit.parse().map_err(|_| ParseError::Syntax {
                    offset: start,
                    message: format!("malformed number `{lit}`"),
                })?;
                let tok = match (is_int, lit.parse::<i64>()) {
                    (true, Ok(v)) => Tok::Int(v),
                    _ => Tok::Num(value),
                };
                out.push((tok, start));
                continue;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                let mut j = i;
                while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_') {
                    j += 1;
                }
                let name = text[i..j].to_string();
                i = j;
                out.push((Tok::Ident(name), start));
                continue;
            }
            _ => {
                let ch = text[i..].chars().next().unwrap_or('?');
                return Err(ParseError::Syntax {
                    offset: start,
                    message: format!("unexpected character `{ch}`"),
                });
            }
        };
        out.push((tok, start));
        i += 1;
    }
    out.push((Tok::End, text.len()));
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    n: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> (Tok, usize) {
        // the trailing End token is sticky
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn unexpected(&self, expected: &str) -> ParseError {
        ParseError::Syntax {
            offset: self.offset(),
            message: format!("expected {expected}, found {}", describe(self.peek())),
        }
    }

    fn expr(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Tok::Plus => {
                    self.bump();
                    lhs = Node::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Tok::Minus => {
                    self.bump();
                    lhs = Node::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Tok::Star => {
                    self.bump();
                    lhs = Node::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Tok::Slash => {
                    self.bump();
                    lhs = Node::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Node, ParseError> {
        match self.peek() {
            Tok::Minus => {
                self.bump();
                Ok(Node::Neg(Box::new(self.unary()?)))
            }
            Tok::Plus => {
                self.bump();
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Node, ParseError> {
        let base = self.atom()?;
        if *self.peek() != Tok::Caret {
            return Ok(base);
        }
        self.bump();
        let negative = if *self.peek() == Tok::Minus {
            self.bump();
            true
        } else {
            false
        };
        match self.peek().clone() {
            Tok::Int(k) => {
                let k = if negative { -k } else { k };
                let k = i32::try_from(k).map_err(|_| ParseError::Syntax {
                    offset: self.offset(),
                    message: "exponent out of range".into(),
                })?;
                self.bump();
                Ok(Node::Pow(Box::new(base), k))
            }
            _ => Err(self.unexpected("an integer exponent")),
        }
    }

    fn atom(&mut self) -> Result<Node, ParseError> {
        let (tok, offset) = self.bump();
        match tok {
            Tok::Num(v) => Ok(Node::Const(v)),
            Tok::Int(v) => Ok(Node::Const(v as f64)),
            Tok::LParen => {
                let inner = self.expr()?;
                if *self.peek() != Tok::RParen {
                    return Err(self.unexpected("`)`"));
                }
                self.bump();
                Ok(inner)
            }
            Tok::Ident(name) => {
                if let Some(func) = Func::from_name(&name) {
                    if *self.peek() != Tok::LParen {
                        return Err(self.unexpected(&format!("`(` after `{name}`")));
                    }
                    self.bump();
                    let arg = self.expr()?;
                    if *self.peek() != Tok::RParen {
                        return Err(self.unexpected("`)`"));
                    }
                    self.bump();
                    return Ok(Node::Call(func, Box::new(arg)));
                }
                if name == "pi" {
                    return Ok(Node::Const(PI));
                }
                if *self.peek() == Tok::LParen {
                    return Err(ParseError::Syntax {
                        offset,
                        message: format!("unknown function `{name}`"),
                    });
                }
                self.variable(name, offset)
            }
            other => Err(ParseError::Syntax {
                offset,
                message: format!("expected an operand, found {}", describe(&other)),
            }),
        }
    }

    fn variable(&self, name: String, offset: usize) -> Result<Node, ParseError> {
        let index = match name.as_str() {
            "x" | "y" | "z" if self.n <= 3 => match name.as_str() {
                "x" => 1,
                "y" => 2,
                _ => 3,
            },
            s if s.len() > 1 && s.starts_with('x') && s[1..].bytes().all(|b| b.is_ascii_digit()) => {
                match s[1..].parse::<usize>() {
                    Ok(i) if i >= 1 => i,
                    _ => return Err(ParseError::UnknownVariable { name, offset }),
                }
            }
            _ => return Err(ParseError::UnknownVariable { name, offset }),
        };
        if index > self.n {
            return Err(ParseError::DimensionMismatch {
                name,
                index,
                n: self.n,
            });
        }
        Ok(Node::Var(index - 1))
    }
}

/// Parses `text` as an expression over `n` coordinates.
pub fn parse_expression(text: &str, n: usize) -> Result<FieldExpr, ParseError> {
    let toks = tokenize(text)?;
    let mut parser = Parser { toks, pos: 0, n };
    if *parser.peek() == Tok::End {
        return Err(ParseError::Syntax {
            offset: 0,
            message: "empty expression".into(),
        });
    }
    let root = parser.expr()?;
    if *parser.peek() != Tok::End {
        return Err(parser.unexpected("an operator or end of input"));
    }
    Ok(FieldExpr { n, root })
}

// ---------------------------------------------------------------------------
// Evaluation

pub fn eval_expr(e: &FieldExpr, p: &[f64]) -> Result<f64, EvalDomainError> {
    if p.len() != e.n {
        return Err(EvalDomainError::PointDimension {
            expected: e.n,
            got: p.len(),
        });
    }
    eval_node(&e.root, p)
}

fn finite(v: f64, what: &'static str) -> Result<f64, EvalDomainError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(EvalDomainError::NonFinite(what))
    }
}

fn eval_node(node: &Node, p: &[f64]) -> Result<f64, EvalDomainError> {
    match node {
        Node::Const(c) => Ok(*c),
        Node::Var(i) => Ok(p[*i]),
        Node::Neg(a) => Ok(-eval_node(a, p)?),
        Node::Add(a, b) => finite(eval_node(a, p)? + eval_node(b, p)?, "addition"),
        Node::Sub(a, b) => finite(eval_node(a, p)? - eval_node(b, p)?, "subtraction"),
        Node::Mul(a, b) => finite(eval_node(a, p)? * eval_node(b, p)?, "multiplication"),
        Node::Div(a, b) => {
            let num = eval_node(a, p)?;
            let den = eval_node(b, p)?;
            if den == 0.0 {
                return Err(EvalDomainError::DivisionByZero);
            }
            finite(num / den, "division")
        }
        Node::Pow(a, k) => {
            let base = eval_node(a, p)?;
            if base == 0.0 && *k < 0 {
                return Err(EvalDomainError::DivisionByZero);
            }
            finite(base.powi(*k), "power")
        }
        Node::Call(func, a) => {
            let x = eval_node(a, p)?;
            match func {
                Func::Sin => Ok(x.sin()),
                Func::Cos => Ok(x.cos()),
                Func::Exp => finite(x.exp(), "exp"),
                Func::Sqrt => {
                    if x < 0.0 {
                        Err(EvalDomainError::NegativeSqrt(x))
                    } else {
                        Ok(x.sqrt())
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Differentiation

fn is_const(node: &Node, value: f64) -> bool {
    matches!(node, Node::Const(c) if *c == value)
}

fn neg(a: Node) -> Node {
    match a {
        Node::Const(c) => Node::Const(-c),
        Node::Neg(inner) => *inner,
        other => Node::Neg(Box::new(other)),
    }
}

fn add(a: Node, b: Node) -> Node {
    match (&a, &b) {
        (Node::Const(x), Node::Const(y)) => Node::Const(x + y),
        _ if is_const(&a, 0.0) => b,
        _ if is_const(&b, 0.0) => a,
        _ => Node::Add(Box::new(a), Box::new(b)),
    }
}

fn sub(a: Node, b: Node) -> Node {
    match (&a, &b) {
        (Node::Const(x), Node::Const(y)) => Node::Const(x - y),
        _ if is_const(&b, 0.0) => a,
        _ if is_const(&a, 0.0) => neg(b),
        _ => Node::Sub(Box::new(a), Box::new(b)),
    }
}

fn mul(a: Node, b: Node) -> Node {
    match (&a, &b) {
        (Node::Const(x), Node::Const(y)) => Node::Const(x * y),
        _ if is_const(&a, 0.0) || is_const(&b, 0.0) => Node::Const(0.0),
        _ if is_const(&a, 1.0) => b,
        _ if is_const(&b, 1.0) => a,
        _ if is_const(&a, -1.0) => neg(b),
        _ if is_const(&b, -1.0) => neg(a),
        _ => Node::Mul(Box::new(a), Box::new(b)),
    }
}

fn div(a: Node, b: Node) -> Node {
    if is_const(&a, 0.0) {
        return Node::Const(0.0);
    }
    if is_const(&b, 1.0) {
        return a;
    }
    Node::Div(Box::new(a), Box::new(b))
}

fn pow(a: Node, k: i32) -> Node {
    match k {
        0 => Node::Const(1.0),
        1 => a,
        _ => Node::Pow(Box::new(a), k),
    }
}

fn diff_node(node: &Node, i: usize) -> Node {
    match node {
        Node::Const(_) => Node::Const(0.0),
        Node::Var(j) => Node::Const(if *j == i { 1.0 } else { 0.0 }),
        Node::Neg(a) => neg(diff_node(a, i)),
        Node::Add(a, b) => add(diff_node(a, i), diff_node(b, i)),
        Node::Sub(a, b) => sub(diff_node(a, i), diff_node(b, i)),
        Node::Mul(a, b) => add(
            mul(diff_node(a, i), (**b).clone()),
            mul((**a).clone(), diff_node(b, i)),
        ),
        Node::Div(a, b) => {
            let da = diff_node(a, i);
            let db = diff_node(b, i);
            if is_const(&db, 0.0) {
                return div(da, (**b).clone());
            }
            div(
                sub(mul(da, (**b).clone()), mul((**a).clone(), db)),
                pow((**b).clone(), 2),
            )
        }
        Node::Pow(a, k) => {
            let da = diff_node(a, i);
            if is_const(&da, 0.0) {
                return Node::Const(0.0);
            }
            mul(mul(Node::Const(*k as f64), pow((**a).clone(), k - 1)), da)
        }
        Node::Call(func, a) => {
            let da = diff_node(a, i);
            if is_const(&da, 0.0) {
                return Node::Const(0.0);
            }
            let arg = (**a).clone();
            let outer = match func {
                Func::Sin => Node::Call(Func::Cos, Box::new(arg)),
                Func::Cos => neg(Node::Call(Func::Sin, Box::new(arg))),
                Func::Exp => Node::Call(Func::Exp, Box::new(arg)),
                Func::Sqrt => {
                    return div(
                        da,
                        mul(Node::Const(2.0), Node::Call(Func::Sqrt, Box::new(arg))),
                    )
                }
            };
            mul(outer, da)
        }
    }
}

/// Symbolic partial derivative with respect to the zero-based coordinate `i`.
pub fn derive_expr(e: &FieldExpr, i: usize) -> FieldExpr {
    FieldExpr {
        n: e.n,
        root: diff_node(&e.root, i),
    }
}

// ---------------------------------------------------------------------------
// Vector fields

/// A vector field on R^n given componentwise, with its symbolic Jacobian.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    components: Vec<FieldExpr>,
    // jacobian[r][c] = d component_r / d x_c
    jacobian: Vec<Vec<FieldExpr>>,
}

impl VectorField {
    pub fn new(components: Vec<FieldExpr>) -> Self {
        let n = components.len();
        let jacobian = components
            .iter()
            .map(|c| (0..n).map(|j| c.derivative(j)).collect())
            .collect();
        Self {
            components,
            jacobian,
        }
    }

    pub fn parse(texts: &[&str]) -> Result<Self, ParseError> {
        let n = texts.len();
        let comps = texts
            .iter()
            .map(|t| parse_expression(t, n))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::new(comps))
    }

    pub fn zero(n: usize) -> Self {
        Self::new((0..n).map(|_| FieldExpr::constant(0.0, n)).collect())
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[FieldExpr] {
        &self.components
    }

    pub fn is_zero(&self) -> bool {
        self.components.iter().all(FieldExpr::is_zero)
    }

    pub fn eval(&self, p: &[f64]) -> Result<DVector<f64>, EvalDomainError> {
        let mut out = DVector::zeros(self.components.len());
        for (r, c) in self.components.iter().enumerate() {
            out[r] = c.eval(p)?;
        }
        Ok(out)
    }

    pub fn eval_jacobian(&self, p: &[f64]) -> Result<DMatrix<f64>, EvalDomainError> {
        let n = self.components.len();
        let mut out = DMatrix::zeros(n, n);
        for r in 0..n {
            for c in 0..n {
                out[(r, c)] = self.jacobian[r][c].eval(p)?;
            }
        }
        Ok(out)
    }
}

/// The driving fields `X_0, X_1, ..., X_m`; index 0 is the drift (paired with `dt`).
#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldSet {
    n: usize,
    fields: Vec<VectorField>,
}

impl VectorFieldSet {
    /// `fields[0]` is the drift. Panics if the list is empty or dimensions disagree.
    pub fn new(n: usize, fields: Vec<VectorField>) -> Self {
        assert!(!fields.is_empty(), "the drift field is mandatory");
        assert!(fields.iter().all(|f| f.dim() == n), "field dimension mismatch");
        Self { n, fields }
    }

    pub fn parse(drift: &[&str], noise: &[Vec<&str>]) -> Result<Self, ParseError> {
        let n = drift.len();
        let mut fields = vec![VectorField::parse(drift)?];
        for comps in noise {
            if comps.len() != n {
                return Err(ParseError::DimensionMismatch {
                    name: format!("noise field with {} components", comps.len()),
                    index: comps.len(),
                    n,
                });
            }
            fields.push(VectorField::parse(comps)?);
        }
        Ok(Self { n, fields })
    }

    pub fn drift_only(drift: VectorField) -> Self {
        let n = drift.dim();
        Self::new(n, vec![drift])
    }

    pub fn zero(n: usize, m: usize) -> Self {
        Self::new(n, (0..=m).map(|_| VectorField::zero(n)).collect())
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Noise dimension `m`.
    pub fn noise_dim(&self) -> usize {
        self.fields.len() - 1
    }

    pub fn field(&self, i: usize) -> &VectorField {
        &self.fields[i]
    }

    pub fn fields(&self) -> &[VectorField] {
        &self.fields
    }

    pub fn eval(&self, i: usize, p: &[f64]) -> Result<DVector<f64>, EvalDomainError> {
        self.fields[i].eval(p)
    }

    pub fn eval_jacobian(&self, i: usize, p: &[f64]) -> Result<DMatrix<f64>, EvalDomainError> {
        self.fields[i].eval_jacobian(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(text: &str, n: usize) -> FieldExpr {
        parse_expression(text, n).unwrap()
    }

    #[test]
    fn single_variable() {
        assert_eq!(p("x", 2).root, Node::Var(0));
        assert_eq!(p("x2", 2).root, Node::Var(1));
    }

    #[test]
    fn example_one_vertical_component_parses() {
        let e = p("-sin(y^2)", 3);
        assert_eq!(
            e.root,
            Node::Neg(Box::new(Node::Call(
                Func::Sin,
                Box::new(Node::Pow(Box::new(Node::Var(1)), 2))
            )))
        );
    }

    #[test]
    fn caret_binds_tighter_than_unary_minus() {
        let e = p("-x^2", 1);
        assert_eq!(e.eval(&[3.0]).unwrap(), -9.0);
    }

    #[test]
    fn syntax_error_offset() {
        match parse_expression("x +* y", 2) {
            Err(ParseError::Syntax { offset, .. }) => assert_eq!(offset, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            parse_expression("", 2),
            Err(ParseError::Syntax { offset: 0, .. })
        ));
        assert!(matches!(
            parse_expression("w + 1", 2),
            Err(ParseError::UnknownVariable { .. })
        ));
        assert!(matches!(
            parse_expression("x3", 2),
            Err(ParseError::DimensionMismatch { index: 3, n: 2, .. })
        ));
        assert!(matches!(
            parse_expression("z", 2),
            Err(ParseError::DimensionMismatch { .. })
        ));
        // aliases only exist up to three dimensions
        assert!(matches!(
            parse_expression("x", 4),
            Err(ParseError::UnknownVariable { .. })
        ));
        assert!(matches!(
            parse_expression("x^0.5", 1),
            Err(ParseError::Syntax { offset: 2, .. })
        ));
        assert!(matches!(
            parse_expression("x^2^3", 1),
            Err(ParseError::Syntax { .. })
        ));
        assert!(matches!(
            parse_expression("tan(x)", 1),
            Err(ParseError::Syntax { .. })
        ));
        assert!(matches!(
            parse_expression("(x + 1", 1),
            Err(ParseError::Syntax { offset: 6, .. })
        ));
        assert!(matches!(
            parse_expression("x # 1", 1),
            Err(ParseError::Syntax { offset: 2, .. })
        ));
    }

    #[test]
    fn evaluation() {
        assert_eq!(p("cos(y^2)", 3).eval(&[0.0, 0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(p("x^2 + y^2", 2).eval(&[3.0, 4.0]).unwrap(), 25.0);
        assert_eq!(
            p("1/x", 1).eval(&[0.0]),
            Err(EvalDomainError::DivisionByZero)
        );
        assert!(matches!(
            p("sqrt(x)", 1).eval(&[-1.0]),
            Err(EvalDomainError::NegativeSqrt(_))
        ));
        assert_eq!(
            p("x^-1", 1).eval(&[0.0]),
            Err(EvalDomainError::DivisionByZero)
        );
        assert!(matches!(
            p("exp(x)", 1).eval(&[1000.0]),
            Err(EvalDomainError::NonFinite(_))
        ));
        assert!((p("2*pi", 1).eval(&[0.0]).unwrap() - 2.0 * PI).abs() < 1e-15);
        assert!(matches!(
            p("x", 2).eval(&[1.0]),
            Err(EvalDomainError::PointDimension { .. })
        ));
    }

    #[test]
    fn derivatives() {
        let d = p("cos(y^2)", 3).derivative(1);
        for &y in &[0.3_f64, -1.1, 2.0] {
            let expect = -2.0 * y * (y * y).sin();
            assert!((d.eval(&[0.0, y, 0.0]).unwrap() - expect).abs() < 1e-14);
        }
        let grad_x = p("(x^2+y^2)/2", 2).derivative(0);
        assert_eq!(grad_x.eval(&[0.7, -3.0]).unwrap(), 0.7);
        assert!(p("x*y", 3).derivative(2).is_zero());
    }

    #[test]
    fn canonical_printer_round_trips() {
        let corpus = [
            "x",
            "-sin(y^2)",
            "cos(y^2)",
            "(x^2 + y^2)/2",
            "x - y - z",
            "x/(y*z)",
            "-x^2 + 3.5e-3*y",
            "exp(-x)*sqrt(1 + y^2)",
            "x^-2 + pi",
            "--x",
            "2*-x",
            "(((x)))",
        ];
        for s in corpus {
            let a = p(s, 3);
            let b = p(&a.to_string(), 3);
            assert_eq!(a, b, "{s} printed as {a}");
        }
    }

    // random polynomial/trig compositions for the derivative property
    fn arb_node(depth: u32) -> BoxedStrategy<Node> {
        let leaf = prop_oneof![
            (-3.0f64..3.0).prop_map(|c| Node::Const((c * 4.0).round() / 4.0)),
            (0usize..3).prop_map(Node::Var),
        ];
        if depth == 0 {
            return leaf.boxed();
        }
        let sub = arb_node(depth - 1);
        prop_oneof![
            leaf,
            (sub.clone(), sub.clone()).prop_map(|(a, b)| Node::Add(Box::new(a), Box::new(b))),
            (sub.clone(), sub.clone()).prop_map(|(a, b)| Node::Sub(Box::new(a), Box::new(b))),
            (sub.clone(), sub.clone()).prop_map(|(a, b)| Node::Mul(Box::new(a), Box::new(b))),
            (sub.clone(), 1i32..4).prop_map(|(a, k)| Node::Pow(Box::new(a), k)),
            sub.clone().prop_map(|a| Node::Call(Func::Sin, Box::new(a))),
            sub.clone().prop_map(|a| Node::Call(Func::Cos, Box::new(a))),
            sub.prop_map(|a| Node::Neg(Box::new(a))),
        ]
        .boxed()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn derivative_matches_central_differences(
            node in arb_node(3),
            point in proptest::collection::vec(-1.0f64..1.0, 3),
            var in 0usize..3,
        ) {
            let e = FieldExpr::from_node(node, 3);
            let d = e.derivative(var);
            let sym = d.eval(&point).unwrap();
            let eps = 1e-5;
            let mut hi = point.clone();
            let mut lo = point.clone();
            hi[var] += eps;
            lo[var] -= eps;
            let fd = (e.eval(&hi).unwrap() - e.eval(&lo).unwrap()) / (2.0 * eps);
            prop_assert!((sym - fd).abs() <= 1e-6 * (1.0 + sym.abs()), "sym {} fd {}", sym, fd);
        }

        #[test]
        fn printing_is_a_fixed_point(node in arb_node(3)) {
            let e = FieldExpr::from_node(node, 3);
            let once = parse_expression(&e.to_string(), 3).unwrap();
            let twice = parse_expression(&once.to_string(), 3).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
