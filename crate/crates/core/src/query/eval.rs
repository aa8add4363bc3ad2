use std::cmp::Ordering;

use serde_json::Value;

use super::lang::{CmpOp, Condition, Literal, QueryExpr};

/// Evaluates `expr` against a JSON value with two-valued logic: a condition
/// whose path is missing is false, so its negation is true.
pub fn eval_expr(expr: &QueryExpr, value: &Value) -> bool {
    match expr {
        QueryExpr::Cond(c) => eval_cond(c, value),
        QueryExpr::And(l, r) => eval_expr(l, value) && eval_expr(r, value),
        QueryExpr::Or(l, r) => eval_expr(l, value) || eval_expr(r, value),
        QueryExpr::Not(e) => !eval_expr(e, value),
    }
}

/// Descends object fields only; arrays are not indexable.
fn resolve<'a>(value: &'a Value, path: &[String]) -> Option<&'a Value> {
    path.iter().try_fold(value, |v, seg| v.as_object()?.get(seg))
}

fn eval_cond(c: &Condition, value: &Value) -> bool {
    let Some(target) = resolve(value, &c.path) else {
        return false;
    };
    if c.op == CmpOp::Contains {
        return match (target, &c.literal) {
            (Value::String(s), Literal::String(needle)) => s.contains(needle.as_str()),
            (Value::Array(items), lit) => items.iter().any(|item| scalar_eq(item, lit)),
            _ => false,
        };
    }
    if matches!(target, Value::Array(_) | Value::Object(_)) {
        return false;
    }
    match c.op {
        CmpOp::Eq => scalar_eq(target, &c.literal),
        CmpOp::Ne => !scalar_eq(target, &c.literal),
        op => match ordering(target, &c.literal) {
            Some(ord) => match op {
                CmpOp::Lt => ord == Ordering::Less,
                CmpOp::Le => ord != Ordering::Greater,
                CmpOp::Gt => ord == Ordering::Greater,
                CmpOp::Ge => ord != Ordering::Less,
                _ => unreachable!("non-ordering ops handled above"),
            },
            None => false,
        },
    }
}

/// Type-sensitive equality; never true between a non-scalar and a literal.
fn scalar_eq(v: &Value, lit: &Literal) -> bool {
    match (v, lit) {
        (Value::Null, Literal::Null) => true,
        (Value::Bool(a), Literal::Bool(b)) => a == b,
        (Value::Number(a), Literal::Number(b)) => a.as_f64() == Some(*b),
        (Value::String(a), Literal::String(b)) => a == b,
        _ => false,
    }
}

/// Numbers numerically, strings by code point; other pairings are unordered.
fn ordering(v: &Value, lit: &Literal) -> Option<Ordering> {
    match (v, lit) {
        (Value::Number(a), Literal::Number(b)) => a.as_f64()?.partial_cmp(b),
        (Value::String(a), Literal::String(b)) => Some(a.as_str().cmp(b.as_str())),
        _ => None,
    }
}
