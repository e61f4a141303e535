use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Expression node over sine, addition, subtraction and multiplication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expr {
    Const(f64),
    /// Index into the owning tree's variable list.
    Var(usize),
    Sin(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn sin(a: Expr) -> Expr {
        Expr::Sin(Box::new(a))
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        Expr::Add(Box::new(a), Box::new(b))
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        Expr::Sub(Box::new(a), Box::new(b))
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        Expr::Mul(Box::new(a), Box::new(b))
    }

    /// Node count.
    pub fn complexity(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Var(_) => 1,
            Expr::Sin(a) => 1 + a.complexity(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) => 1 + a.complexity() + b.complexity(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Var(_) => 1,
            Expr::Sin(a) => 1 + a.depth(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) => 1 + a.depth().max(b.depth()),
        }
    }

    pub fn has_var(&self) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Var(_) => true,
            Expr::Sin(a) => a.has_var(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) => a.has_var() || b.has_var(),
        }
    }

    pub fn max_var(&self) -> Option<usize> {
        match self {
            Expr::Const(_) => None,
            Expr::Var(i) => Some(*i),
            Expr::Sin(a) => a.max_var(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) => a.max_var().max(b.max_var()),
        }
    }

    /// Evaluates over column-major inputs of `n` samples.
    pub fn eval(&self, cols: &[&[f64]], n: usize) -> Vec<f64> {
        match self {
            Expr::Const(c) => vec![*c; n],
            Expr::Var(i) => cols[*i][..n].to_vec(),
            Expr::Sin(a) => {
                let mut v = a.eval(cols, n);
                v.iter_mut().for_each(|x| *x = x.sin());
                v
            }
            Expr::Add(a, b) => zip_with(a.eval(cols, n), &b.eval(cols, n), |x, y| x + y),
            Expr::Sub(a, b) => zip_with(a.eval(cols, n), &b.eval(cols, n), |x, y| x - y),
            Expr::Mul(a, b) => zip_with(a.eval(cols, n), &b.eval(cols, n), |x, y| x * y),
        }
    }

    pub fn eval_point(&self, x: &[f64]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(i) => x[*i],
            Expr::Sin(a) => a.eval_point(x).sin(),
            Expr::Add(a, b) => a.eval_point(x) + b.eval_point(x),
            Expr::Sub(a, b) => a.eval_point(x) - b.eval_point(x),
            Expr::Mul(a, b) => a.eval_point(x) * b.eval_point(x),
        }
    }

    pub fn constants(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |e| {
            if let Expr::Const(c) = e {
                out.push(*c);
            }
        });
        out
    }

    pub fn set_constants(&mut self, values: &[f64]) {
        let mut it = values.iter();
        self.visit_mut(&mut |e| {
            if let Expr::Const(c) = e {
                if let Some(v) = it.next() {
                    *c = *v;
                }
            }
        });
    }

    /// Preorder traversal.
    pub fn visit(&self, f: &mut impl FnMut(&Expr)) {
        f(self);
        match self {
            Expr::Const(_) | Expr::Var(_) => {}
            Expr::Sin(a) => a.visit(f),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) => {
                a.visit(f);
                b.visit(f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut Expr)) {
        f(self);
        match self {
            Expr::Const(_) | Expr::Var(_) => {}
            Expr::Sin(a) => a.visit_mut(f),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) => {
                a.visit_mut(f);
                b.visit_mut(f);
            }
        }
    }

    /// Subtree at preorder position `idx`.
    pub fn node(&self, idx: usize) -> &Expr {
        let mut count = idx;
        self.node_inner(&mut count).expect("node index in range")
    }

    fn node_inner(&self, count: &mut usize) -> Option<&Expr> {
        if *count == 0 {
            return Some(self);
        }
        *count -= 1;
        match self {
            Expr::Const(_) | Expr::Var(_) => None,
            Expr::Sin(a) => a.node_inner(count),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) => a.node_inner(count).or_else(|| b.node_inner(count)),
        }
    }

    pub fn node_mut(&mut self, idx: usize) -> &mut Expr {
        let mut count = idx;
        self.node_mut_inner(&mut count).expect("node index in range")
    }

    fn node_mut_inner(&mut self, count: &mut usize) -> Option<&mut Expr> {
        if *count == 0 {
            return Some(self);
        }
        *count -= 1;
        match self {
            Expr::Const(_) | Expr::Var(_) => None,
            Expr::Sin(a) => a.node_mut_inner(count),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) => match a.node_mut_inner(count) {
                Some(n) => Some(n),
                None => b.node_mut_inner(count),
            },
        }
    }

    /// Constant folding and identity elimination.
    pub fn simplified(&self) -> Expr {
        use Expr::*;
        let folded = match self {
            Const(_) | Var(_) => return self.clone(),
            Sin(a) => Sin(Box::new(a.simplified())),
            Add(a, b) => Add(Box::new(a.simplified()), Box::new(b.simplified())),
            Sub(a, b) => Sub(Box::new(a.simplified()), Box::new(b.simplified())),
            Mul(a, b) => Mul(Box::new(a.simplified()), Box::new(b.simplified())),
        };
        if !folded.has_var() {
            return Const(folded.eval_point(&[]));
        }
        match folded {
            Add(a, b) => match (*a, *b) {
                (Const(z), e) | (e, Const(z)) if z == 0.0 => e,
                (Const(c), Add(x, y)) | (Add(x, y), Const(c)) => merge_add(c, *x, *y),
                (a, b) => Add(Box::new(a), Box::new(b)),
            },
            Sub(a, b) => match (*a, *b) {
                (a, b) if a == b => Const(0.0),
                (e, Const(z)) if z == 0.0 => e,
                (a, b) => Sub(Box::new(a), Box::new(b)),
            },
            Mul(a, b) => match (*a, *b) {
                (Const(z), _) | (_, Const(z)) if z == 0.0 => Const(0.0),
                (Const(o), e) | (e, Const(o)) if o == 1.0 => e,
                (Const(c), Mul(x, y)) | (Mul(x, y), Const(c)) => merge_mul(c, *x, *y),
                (a, b) => Mul(Box::new(a), Box::new(b)),
            },
            other => other,
        }
    }
}

fn merge_add(c: f64, x: Expr, y: Expr) -> Expr {
    match (x, y) {
        (Expr::Const(d), e) | (e, Expr::Const(d)) => Expr::add(e, Expr::Const(c + d)).simplified(),
        (x, y) => Expr::add(Expr::Const(c), Expr::add(x, y)),
    }
}

fn merge_mul(c: f64, x: Expr, y: Expr) -> Expr {
    match (x, y) {
        (Expr::Const(d), e) | (e, Expr::Const(d)) => Expr::mul(Expr::Const(c * d), e).simplified(),
        (x, y) => Expr::mul(Expr::Const(c), Expr::mul(x, y)),
    }
}

fn zip_with(mut a: Vec<f64>, b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter_mut().zip(b).for_each(|(x, y)| *x = f(*x, *y));
    a
}

/// Named input columns, one value per sample in each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Samples {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl Samples {
    pub fn new(names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::DimensionMismatch {
                expected: names.len(),
                got: columns.len(),
            });
        }
        if let Some(first) = columns.first() {
            for c in &columns {
                if c.len() != first.len() {
                    return Err(Error::SampleMismatch {
                        left: first.len(),
                        right: c.len(),
                    });
                }
            }
        }
        Ok(Self { names, columns })
    }

    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows whose mask entry is `keep`.
    pub fn select(&self, mask: &[bool], keep: bool) -> Samples {
        let columns = self
            .columns
            .iter()
            .map(|c| c.iter().zip(mask).filter(|(_, &m)| m == keep).map(|(v, _)| *v).collect())
            .collect();
        Samples {
            names: self.names.clone(),
            columns,
        }
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.columns[i].as_slice())
    }
}

/// An expression together with the names of its variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressionTree {
    pub variables: Vec<String>,
    pub root: Expr,
}

impl ExpressionTree {
    pub fn new(variables: Vec<String>, root: Expr) -> Result<Self> {
        if let Some(i) = root.max_var() {
            if i >= variables.len() {
                return Err(Error::UnboundVariable(format!("#{i}")));
            }
        }
        Ok(Self { variables, root })
    }

    pub fn constant(value: f64) -> Self {
        Self {
            variables: Vec::new(),
            root: Expr::Const(value),
        }
    }

    pub fn complexity(&self) -> usize {
        self.root.complexity()
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    /// Evaluates on every sample, binding variables by name. Non-finite
    /// outputs are returned as they are.
    pub fn evaluate(&self, samples: &Samples) -> Result<Vec<f64>> {
        let cols = self
            .variables
            .iter()
            .map(|v| samples.column(v).ok_or_else(|| Error::UnboundVariable(v.clone())))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.root.eval(&cols, samples.len()))
    }

    pub fn simplify(&self) -> Self {
        Self {
            variables: self.variables.clone(),
            root: self.root.simplified(),
        }
    }

    /// S-expression text, e.g. `(sub (mul 0.7 (sin x)) 0.2)`.
    pub fn to_prefix(&self) -> String {
        let mut s = String::new();
        self.write_prefix(&self.root, &mut s);
        s
    }

    fn write_prefix(&self, e: &Expr, s: &mut String) {
        match e {
            Expr::Const(c) => s.push_str(&format!("{c:?}")),
            Expr::Var(i) => s.push_str(&self.variables[*i]),
            Expr::Sin(a) => {
                s.push_str("(sin ");
                self.write_prefix(a, s);
                s.push(')');
            }
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) => {
                let op = match e {
                    Expr::Add(..) => "add",
                    Expr::Sub(..) => "sub",
                    _ => "mul",
                };
                s.push('(');
                s.push_str(op);
                s.push(' ');
                self.write_prefix(a, s);
                s.push(' ');
                self.write_prefix(b, s);
                s.push(')');
            }
        }
    }

    /// Parses [`to_prefix`](Self::to_prefix) output. Variables are numbered
    /// in order of first appearance.
    pub fn parse_prefix(text: &str) -> Result<Self> {
        let spaced = text.replace('(', " ( ").replace(')', " ) ");
        let tokens: Vec<&str> = spaced.split_whitespace().collect();
        let mut variables = Vec::new();
        let mut pos = 0;
        let root = parse_tokens(&tokens, &mut pos, &mut variables)?;
        if pos != tokens.len() {
            return Err(Error::Config(format!("trailing input in expression `{text}`")));
        }
        Ok(Self { variables, root })
    }
}

fn parse_tokens(tokens: &[&str], pos: &mut usize, vars: &mut Vec<String>) -> Result<Expr> {
    let bad = |msg: &str| Error::Config(format!("malformed expression: {msg}"));
    let tok = *tokens.get(*pos).ok_or_else(|| bad("unexpected end"))?;
    *pos += 1;
    if tok == "(" {
        let op = *tokens.get(*pos).ok_or_else(|| bad("missing operator"))?;
        *pos += 1;
        let a = parse_tokens(tokens, pos, vars)?;
        let e = if op == "sin" {
            Expr::sin(a)
        } else {
            let b = parse_tokens(tokens, pos, vars)?;
            match op {
                "add" => Expr::add(a, b),
                "sub" => Expr::sub(a, b),
                "mul" => Expr::mul(a, b),
                other => return Err(bad(&format!("unknown operator `{other}`"))),
            }
        };
        if tokens.get(*pos) != Some(&")") {
            return Err(bad("expected `)`"));
        }
        *pos += 1;
        return Ok(e);
    }
    if tok == ")" {
        return Err(bad("unexpected `)`"));
    }
    if let Ok(v) = tok.parse::<f64>() {
        if !v.is_finite() {
            return Err(bad("non-finite constant"));
        }
        return Ok(Expr::Const(v));
    }
    let idx = match vars.iter().position(|v| v == tok) {
        Some(i) => i,
        None => {
            vars.push(tok.to_string());
            vars.len() - 1
        }
    };
    Ok(Expr::Var(idx))
}

impl fmt::Display for ExpressionTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn prec(e: &Expr) -> u8 {
            match e {
                Expr::Add(..) | Expr::Sub(..) => 1,
                Expr::Mul(..) => 2,
                Expr::Const(c) if *c < 0.0 => 0,
                _ => 3,
            }
        }
        fn go(t: &ExpressionTree, e: &Expr, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            let wrap = |f: &mut fmt::Formatter<'_>, child: &Expr, min: u8| -> fmt::Result {
                if prec(child) < min {
                    write!(f, "(")?;
                    go(t, child, f)?;
                    write!(f, ")")
                } else {
                    go(t, child, f)
                }
            };
            match e {
                Expr::Const(c) => write!(f, "{c}"),
                Expr::Var(i) => write!(f, "{}", t.variables[*i]),
                Expr::Sin(a) => {
                    write!(f, "sin(")?;
                    go(t, a, f)?;
                    write!(f, ")")
                }
                Expr::Add(a, b) if matches!(**b, Expr::Const(c) if c < 0.0) => {
                    let Expr::Const(c) = **b else { unreachable!() };
                    wrap(f, a, 1)?;
                    write!(f, " - {}", -c)
                }
                Expr::Add(a, b) => {
                    wrap(f, a, 1)?;
                    write!(f, " + ")?;
                    wrap(f, b, 1)
                }
                Expr::Sub(a, b) => {
                    wrap(f, a, 1)?;
                    write!(f, " - ")?;
                    wrap(f, b, 2)
                }
                Expr::Mul(a, b) => {
                    wrap(f, a, 2)?;
                    write!(f, " * ")?;
                    wrap(f, b, 3)
                }
            }
        }
        go(self, &self.root, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn x_samples(xs: &[f64]) -> Samples {
        Samples::new(vec!["x".into()], vec![xs.to_vec()]).unwrap()
    }

    fn parse(s: &str) -> ExpressionTree {
        ExpressionTree::parse_prefix(s).unwrap()
    }

    #[test]
    fn hand_evaluations() {
        assert_eq!(parse("x").evaluate(&x_samples(&[1.0, 2.0, 3.0])).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(parse("(sub (mul (sin x) 2.0) 1.0)").evaluate(&x_samples(&[0.0])).unwrap(), vec![-1.0]);
    }

    #[test]
    fn single_pendulum_expression_at_zero() {
        let t = parse("(sub (sub (mul (sub 0.27 (mul 0.15 (sin (add theta 1.48)))) (sin (sub (mul 2.0 theta) 0.9))) (mul 0.74 (sin theta))) 0.26)");
        let s = Samples::new(vec!["theta".into()], vec![vec![0.0]]).unwrap();
        let expected = (0.27 - 0.15 * 1.48_f64.sin()) * (-0.9_f64).sin() - 0.26;
        let got = t.evaluate(&s).unwrap()[0];
        assert!((got - expected).abs() < 1e-15);
        assert!((got - -0.35449).abs() < 1e-5);
    }

    #[test]
    fn unbound_variable_is_reported() {
        let err = parse("(add x y)").evaluate(&x_samples(&[1.0])).unwrap_err();
        assert!(matches!(err, Error::UnboundVariable(v) if v == "y"));
    }

    #[test]
    fn overflow_stays_non_finite() {
        let t = parse("(mul x (mul x x))");
        assert!(!t.evaluate(&x_samples(&[1e200])).unwrap()[0].is_finite());
    }

    #[test]
    fn simplify_examples() {
        assert_eq!(parse("(add x 0.0)").simplify().to_prefix(), "x");
        assert_eq!(parse("(sin (mul (mul 0.5 2.0) x))").simplify().to_prefix(), "(sin x)");
        assert_eq!(parse("(sub x x)").simplify().to_prefix(), "0.0");
        assert_eq!(parse("(add 1.0 (add x 2.0))").simplify().to_prefix(), "(add x 3.0)");
    }

    #[test]
    fn display_is_infix() {
        assert_eq!(parse("(sub (mul 0.7 (sin x)) 0.2)").to_string(), "0.7 * sin(x) - 0.2");
        assert_eq!(parse("(sub x (add x 1.0))").to_string(), "x - (x + 1)");
    }

    #[test]
    fn node_indexing_is_preorder() {
        let t = parse("(add (sin x) 2.0)");
        assert_eq!(t.root.node(1), &Expr::sin(Expr::Var(0)));
        assert_eq!(t.root.node(2), &Expr::Var(0));
        assert_eq!(t.root.node(3), &Expr::Const(2.0));
        let mut r = t.root.clone();
        *r.node_mut(3) = Expr::Var(0);
        assert_eq!(r, Expr::add(Expr::sin(Expr::Var(0)), Expr::Var(0)));
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![(-5.0..5.0f64).prop_map(Expr::Const), (0..2usize).prop_map(Expr::Var)];
        leaf.prop_recursive(5, 40, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(Expr::sin),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::add(a, b)),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::sub(a, b)),
                (inner.clone(), inner).prop_map(|(a, b)| Expr::mul(a, b)),
            ]
        })
    }

    fn probe() -> Samples {
        let xs = (0..1000).map(|i| -3.0 + 6.0 * i as f64 / 999.0).collect();
        let ys = (0..1000).map(|i| ((i * 7919) % 1000) as f64 / 250.0 - 2.0).collect();
        Samples::new(vec!["a".into(), "b".into()], vec![xs, ys]).unwrap()
    }

    proptest! {
        #[test]
        fn simplify_preserves_values(e in arb_expr()) {
            let t = ExpressionTree::new(vec!["a".into(), "b".into()], e).unwrap();
            let s = probe();
            let before = t.evaluate(&s).unwrap();
            let after = t.simplify().evaluate(&s).unwrap();
            for (x, y) in before.iter().zip(&after) {
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
            }
            prop_assert!(t.simplify().complexity() <= t.complexity());
        }

        #[test]
        fn prefix_text_and_json_round_trip(e in arb_expr()) {
            let t = ExpressionTree::new(vec!["a".into(), "b".into()], e).unwrap();
            let back = ExpressionTree::parse_prefix(&t.to_prefix()).unwrap();
            let s = probe();
            prop_assert_eq!(t.evaluate(&s).unwrap(), back.evaluate(&s).unwrap());
            let json: ExpressionTree = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
            prop_assert_eq!(json, t);
        }
    }
}
