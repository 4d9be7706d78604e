//! Coefficient expression language.
//!
//! Drift, diffusion, reward, domain membership functions and feedback
//! policies are all written as scalar expressions in the variables `t`,
//! `x1..xd` and `u1..um`:
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' unary)?          (right associative)
//! primary := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Functions: `abs min max exp log sin cos sqrt sign tanh`.
//!
//! Conventions fixed for determinism: `sign(0) = 0` and `0^0 = 1`.
//! Division by zero, `log` of a non-positive number, `sqrt` of a negative
//! number and powers without a real value are evaluation errors rather
//! than silent NaNs.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Abs,
    Min,
    Max,
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
    Sign,
    Tanh,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "abs" => Func::Abs,
            "min" => Func::Min,
            "max" => Func::Max,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "sqrt" => Func::Sqrt,
            "sign" => Func::Sign,
            "tanh" => Func::Tanh,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Sqrt => "sqrt",
            Func::Sign => "sign",
            Func::Tanh => "tanh",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }
}

/// Abstract syntax tree node. Variable indices are zero based.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Const(f64),
    Time,
    State(usize),
    Control(usize),
    Neg(Box<Node>),
    Binary(BinOp, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

/// A parsed expression together with the dimensions it was checked against.
#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    root: Node,
    state_dim: usize,
    control_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("unknown identifier `{0}`")]
    UnknownIdentifier(String),
    #[error("variable index out of range: `{name}` (declared dimension {limit})")]
    VariableOutOfRange { name: String, limit: usize },
    #[error("function `{name}` takes {expected} argument(s), got {got}")]
    Arity {
        name: String,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind} at byte {offset}")]
pub struct ParseError {
    pub offset: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalErrorKind {
    DivisionByZero,
    LogNonPositive,
    SqrtNegative,
    PowDomain,
}

impl fmt::Display for EvalErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalErrorKind::DivisionByZero => "division by zero",
            EvalErrorKind::LogNonPositive => "log of a non-positive number",
            EvalErrorKind::SqrtNegative => "sqrt of a negative number",
            EvalErrorKind::PowDomain => "power has no real value",
        })
    }
}

/// Evaluation failure, carrying the offending subexpression.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind} in `{subexpr}`")]
pub struct EvalError {
    pub kind: EvalErrorKind,
    pub subexpr: String,
}

impl Expression {
    /// Parses `text` for a problem with state dimension `d` and control
    /// dimension `m`.
    pub fn parse(text: &str, d: usize, m: usize) -> Result<Expression, ParseError> {
        let tokens = tokenize(text)?;
        let mut parser = Parser {
            tokens: &tokens,
            pos: 0,
            end: text.len(),
            d,
            m,
        };
        let root = parser.expr()?;
        if let Some(tok) = parser.peek() {
            return Err(ParseError {
                offset: tok.offset,
                kind: ParseErrorKind::Syntax(format!("unexpected {}", tok.kind.describe())),
            });
        }
        Ok(Expression {
            root,
            state_dim: d,
            control_dim: m,
        })
    }

    pub fn constant(value: f64, d: usize, m: usize) -> Expression {
        Expression {
            root: Node::Const(value),
            state_dim: d,
            control_dim: m,
        }
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn uses_time(&self) -> bool {
        any_node(&self.root, &|n| matches!(n, Node::Time))
    }

    pub fn uses_control(&self) -> bool {
        any_node(&self.root, &|n| matches!(n, Node::Control(_)))
    }

    /// Returns the constant value if the expression has no variables.
    pub fn as_constant(&self) -> Option<f64> {
        if any_node(&self.root, &|n| {
            matches!(n, Node::Time | Node::State(_) | Node::Control(_))
        }) {
            None
        } else {
            eval_node(&self.root, 0.0, &[], &[]).ok()
        }
    }

    /// Evaluates at `(t, x, u)`. `x` must have at least `d` entries and `u`
    /// at least `m`.
    pub fn eval(&self, t: f64, x: &[f64], u: &[f64]) -> Result<f64, EvalError> {
        assert!(
            x.len() >= self.state_dim && u.len() >= self.control_dim,
            "expression evaluated with x of length {} (need {}) and u of length {} (need {})",
            x.len(),
            self.state_dim,
            u.len(),
            self.control_dim
        );
        eval_node(&self.root, t, x, u)
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.root)
    }
}

/// Fully parenthesized rendering; parses back to an equivalent tree.
impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Const(c) => {
                if *c < 0.0 || (*c == 0.0 && c.is_sign_negative()) {
                    write!(f, "(-{:?})", -c)
                } else {
                    write!(f, "{c:?}")
                }
            }
            Node::Time => f.write_str("t"),
            Node::State(i) => write!(f, "x{}", i + 1),
            Node::Control(i) => write!(f, "u{}", i + 1),
            Node::Neg(a) => write!(f, "(-{a})"),
            Node::Binary(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Node::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

fn any_node(node: &Node, pred: &dyn Fn(&Node) -> bool) -> bool {
    if pred(node) {
        return true;
    }
    match node {
        Node::Neg(a) => any_node(a, pred),
        Node::Binary(_, a, b) => any_node(a, pred) || any_node(b, pred),
        Node::Call(_, args) => args.iter().any(|a| any_node(a, pred)),
        _ => false,
    }
}

fn eval_error(kind: EvalErrorKind, node: &Node) -> EvalError {
    EvalError {
        kind,
        subexpr: node.to_string(),
    }
}

fn eval_node(node: &Node, t: f64, x: &[f64], u: &[f64]) -> Result<f64, EvalError> {
    Ok(match node {
        Node::Const(c) => *c,
        Node::Time => t,
        Node::State(i) => x[*i],
        Node::Control(i) => u[*i],
        Node::Neg(a) => -eval_node(a, t, x, u)?,
        Node::Binary(op, a, b) => {
            let a = eval_node(a, t, x, u)?;
            let b = eval_node(b, t, x, u)?;
            match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                BinOp::Div => {
                    if b == 0.0 {
                        return Err(eval_error(EvalErrorKind::DivisionByZero, node));
                    }
                    a / b
                }
                BinOp::Pow => {
                    if a == 0.0 && b < 0.0 {
                        return Err(eval_error(EvalErrorKind::DivisionByZero, node));
                    }
                    let r = a.powf(b);
                    if r.is_nan() && !a.is_nan() && !b.is_nan() {
                        return Err(eval_error(EvalErrorKind::PowDomain, node));
                    }
                    r
                }
            }
        }
        Node::Call(func, args) => {
            let a = eval_node(&args[0], t, x, u)?;
            match func {
                Func::Abs => a.abs(),
                Func::Min => a.min(eval_node(&args[1], t, x, u)?),
                Func::Max => a.max(eval_node(&args[1], t, x, u)?),
                Func::Exp => a.exp(),
                Func::Log => {
                    if a <= 0.0 {
                        return Err(eval_error(EvalErrorKind::LogNonPositive, node));
                    }
                    a.ln()
                }
                Func::Sin => a.sin(),
                Func::Cos => a.cos(),
                Func::Sqrt => {
                    if a < 0.0 {
                        return Err(eval_error(EvalErrorKind::SqrtNegative, node));
                    }
                    a.sqrt()
                }
                Func::Sign => {
                    if a > 0.0 {
                        1.0
                    } else if a < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }
                Func::Tanh => a.tanh(),
            }
        }
    })
}

// ---------------------------------------------------------------------------
// Lexer

#[derive(Debug, Clone, PartialEq)]
enum TokenKind {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
}

impl TokenKind {
    fn describe(&self) -> String {
        match self {
            TokenKind::Num(v) => format!("number {v}"),
            TokenKind::Ident(s) => format!("identifier `{s}`"),
            TokenKind::Op(c) => format!("operator `{c}`"),
            TokenKind::LParen => "`(`".into(),
            TokenKind::RParen => "`)`".into(),
            TokenKind::Comma => "`,`".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokenKind,
    offset: usize,
}

fn tokenize(text: &str) -> Result<Vec<Token>, ParseError> {
    let mut tokens = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some(&(offset, c)) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
            continue;
        }
        let kind = match c {
            '+' | '*' | '/' | '^' | '-' => {
                chars.next();
                TokenKind::Op(c)
            }
            // U+2212 MINUS SIGN, common when formulas are copied from typeset text.
            '\u{2212}' => {
                chars.next();
                TokenKind::Op('-')
            }
            '(' => {
                chars.next();
                TokenKind::LParen
            }
            ')' => {
                chars.next();
                TokenKind::RParen
            }
            ',' => {
                chars.next();
                TokenKind::Comma
            }
            c if c.is_ascii_digit() || c == '.' => {
                let mut end = offset;
                let bytes = text.as_bytes();
                while end < bytes.len() && (bytes[end].is_ascii_digit() || bytes[end] == b'.') {
                    end += 1;
                }
                if end < bytes.len() && (bytes[end] == b'e' || bytes[end] == b'E') {
                    let mut probe = end + 1;
                    if probe < bytes.len() && (bytes[probe] == b'+' || bytes[probe] == b'-') {
                        probe += 1;
                    }
                    if probe < bytes.len() && bytes[probe].is_ascii_digit() {
                        end = probe;
                        while end < bytes.len() && bytes[end].is_ascii_digit() {
                            end += 1;
                        }
                    }
                }
                let lexeme = &text[offset..end];
                let value: f64 = lexeme.parse().map_err(|_| ParseError {
                    offset,
                    kind: ParseErrorKind::Syntax(format!("malformed number `{lexeme}`")),
                })?;
                if !value.is_finite() {
                    return Err(ParseError {
                        offset,
                        kind: ParseErrorKind::Syntax(format!("number `{lexeme}` out of range")),
                    });
                }
                while chars.peek().is_some_and(|&(i, _)| i < end) {
                    chars.next();
                }
                TokenKind::Num(value)
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut name = String::new();
                while let Some(&(_, c)) = chars.peek() {
                    if c.is_ascii_alphanumeric() || c == '_' {
                        name.push(c);
                        chars.next();
                    } else {
                        break;
                    }
                }
                TokenKind::Ident(name)
            }
            other => {
                return Err(ParseError {
                    offset,
                    kind: ParseErrorKind::Syntax(format!("unexpected character `{other}`")),
                })
            }
        };
        tokens.push(Token { kind, offset });
    }
    Ok(tokens)
}

// ---------------------------------------------------------------------------
// Recursive descent parser

struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
    end: usize,
    d: usize,
    m: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn eat_op(&mut self, ops: &[char]) -> Option<char> {
        match self.peek() {
            Some(Token {
                kind: TokenKind::Op(c),
                ..
            }) if ops.contains(c) => {
                let c = *c;
                self.pos += 1;
                Some(c)
            }
            _ => None,
        }
    }

    fn expect(&mut self, want: TokenKind, what: &str) -> Result<(), ParseError> {
        match self.peek() {
            Some(tok) if tok.kind == want => {
                self.pos += 1;
                Ok(())
            }
            Some(tok) => Err(ParseError {
                offset: tok.offset,
                kind: ParseErrorKind::Syntax(format!(
                    "expected {what}, found {}",
                    tok.kind.describe()
                )),
            }),
            None => Err(ParseError {
                offset: self.end,
                kind: ParseErrorKind::Syntax(format!("expected {what}, found end of input")),
            }),
        }
    }

    fn expr(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.term()?;
        while let Some(c) = self.eat_op(&['+', '-']) {
            let rhs = self.term()?;
            let op = if c == '+' { BinOp::Add } else { BinOp::Sub };
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.unary()?;
        while let Some(c) = self.eat_op(&['*', '/']) {
            let rhs = self.unary()?;
            let op = if c == '*' { BinOp::Mul } else { BinOp::Div };
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node, ParseError> {
        if self.eat_op(&['-']).is_some() {
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node, ParseError> {
        let base = self.primary()?;
        if self.eat_op(&['^']).is_some() {
            let exponent = self.unary()?;
            return Ok(Node::Binary(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Node, ParseError> {
        let Some(tok) = self.peek().cloned() else {
            return Err(ParseError {
                offset: self.end,
                kind: ParseErrorKind::Syntax("unexpected end of input".into()),
            });
        };
        self.pos += 1;
        match tok.kind {
            TokenKind::Num(v) => Ok(Node::Const(v)),
            TokenKind::LParen => {
                let inner = self.expr()?;
                self.expect(TokenKind::RParen, "`)`")?;
                Ok(inner)
            }
            TokenKind::Ident(name) => {
                if matches!(self.peek().map(|t| &t.kind), Some(TokenKind::LParen)) {
                    self.call(name, tok.offset)
                } else {
                    self.variable(&name, tok.offset)
                }
            }
            other => Err(ParseError {
                offset: tok.offset,
                kind: ParseErrorKind::Syntax(format!("unexpected {}", other.describe())),
            }),
        }
    }

    fn call(&mut self, name: String, offset: usize) -> Result<Node, ParseError> {
        let func = Func::from_name(&name).ok_or_else(|| ParseError {
            offset,
            kind: ParseErrorKind::UnknownIdentifier(name.clone()),
        })?;
        self.expect(TokenKind::LParen, "`(`")?;
        let mut args = vec![self.expr()?];
        while matches!(self.peek().map(|t| &t.kind), Some(TokenKind::Comma)) {
            self.pos += 1;
            args.push(self.expr()?);
        }
        self.expect(TokenKind::RParen, "`)`")?;
        if args.len() != func.arity() {
            return Err(ParseError {
                offset,
                kind: ParseErrorKind::Arity {
                    name,
                    expected: func.arity(),
                    got: args.len(),
                },
            });
        }
        Ok(Node::Call(func, args))
    }

    fn variable(&self, name: &str, offset: usize) -> Result<Node, ParseError> {
        if name == "t" {
            return Ok(Node::Time);
        }
        let (prefix, digits) = name.split_at(1);
        let indexed = (prefix == "x" || prefix == "u")
            && !digits.is_empty()
            && digits.bytes().all(|b| b.is_ascii_digit());
        if !indexed {
            return Err(ParseError {
                offset,
                kind: ParseErrorKind::UnknownIdentifier(name.to_string()),
            });
        }
        let limit = if prefix == "x" { self.d } else { self.m };
        let index: usize = digits.parse().unwrap_or(usize::MAX);
        if index == 0 || index > limit {
            return Err(ParseError {
                offset,
                kind: ParseErrorKind::VariableOutOfRange {
                    name: name.to_string(),
                    limit,
                },
            });
        }
        Ok(if prefix == "x" {
            Node::State(index - 1)
        } else {
            Node::Control(index - 1)
        })
    }
}
