//! Text front end for rules: communication sequences with `->` for "then",
//! `=>` for "consequently", `^A`/`^D` decisions and side conditions after a
//! comma.
//!
//! Supported shapes, one per line with an optional `label:` prefix:
//!
//! ```text
//! E precedes E
//! E -> ... -> E => F [unless G]
//! !(E -> ... => F) [unless G]
//! E, var = literal, ...
//! [E]^N => E
//! [Ef -> Ea]^1 -> Ef_k => Ea_k, d in|notin R and v + sum(...) > LIMIT : ("key", R) in P_TA(task, b)
//! ```
//!
//! An event is `[(user, account)] action group* decision` where a group is
//! `(key = term, ...)` and the decision is `^A`, `^D`, `(^A)` or `(^D)`.
//! Terms are variables, `_`, strings, integers and `$N` (N whole units,
//! stored as N * 100).

use std::fmt;

use thiserror::Error;

use super::{DestFilter, EventPattern, Rule, RuleDef, Term};
use crate::lex::{tokenize_from, Cursor, LexError, Pos, Tok};
use crate::model::{Decision, ParamValue};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NotationError {
    #[error(transparent)]
    Lex(#[from] LexError),
    #[error("{pos}: {msg}")]
    Syntax { pos: Pos, msg: String },
    #[error("line {line}: duplicate rule label {label:?}")]
    DuplicateLabel { line: usize, label: String },
}

type Result<T> = std::result::Result<T, NotationError>;

fn err<T>(pos: Pos, msg: impl fmt::Display) -> Result<T> {
    Err(NotationError::Syntax { pos, msg: msg.to_string() })
}

/// Compiles a single rule written on one line.
pub fn compile_notation(text: &str) -> Result<Rule> {
    let mut c = Cursor::new(tokenize_from(text, 1)?);
    let rule = parse_rule(&mut c)?;
    expect_eof(&c)?;
    Ok(rule)
}

/// Parses a rule file. Lines without a label get the label `rN`, N being
/// the rule's 1-based position in the file.
pub fn parse_rules(src: &str) -> Result<Vec<RuleDef>> {
    let mut out: Vec<RuleDef> = Vec::new();
    for (i, line) in src.lines().enumerate() {
        let lineno = i + 1;
        let toks = tokenize_from(line, lineno)?;
        if matches!(toks[0].tok, Tok::Eof) {
            continue;
        }
        let mut c = Cursor::new(toks);
        let label = match (c.peek().clone(), c.peek_at(1)) {
            (Tok::Ident(s), Tok::Sym(":")) => Some(s),
            (Tok::Int(v), Tok::Sym(":")) => Some(v.to_string()),
            _ => None,
        };
        if label.is_some() {
            c.next();
            c.next();
        }
        let body_start = line.find(':').filter(|_| label.is_some()).map_or(0, |p| p + 1);
        let rule = parse_rule(&mut c)?;
        expect_eof(&c)?;
        if let Err(msg) = rule.validate() {
            return err(Pos { line: lineno, col: 1 }, msg);
        }
        let id = label.unwrap_or_else(|| format!("r{}", out.len() + 1));
        if out.iter().any(|d| d.id == id) {
            return Err(NotationError::DuplicateLabel { line: lineno, label: id });
        }
        out.push(RuleDef { id, source: strip_comment(&line[body_start..]).trim().to_string(), rule });
    }
    Ok(out)
}

fn strip_comment(s: &str) -> &str {
    let mut in_str = false;
    for (i, ch) in s.char_indices() {
        match ch {
            '"' => in_str = !in_str,
            '#' if !in_str => return &s[..i],
            _ => {}
        }
    }
    s
}

fn expect_eof(c: &Cursor) -> Result<()> {
    if c.at_eof() {
        Ok(())
    } else {
        err(c.pos(), format!("unexpected {} after rule", c.peek()))
    }
}

fn expect_sym(c: &mut Cursor, s: &str) -> Result<()> {
    if c.eat_sym(s) {
        Ok(())
    } else {
        err(c.pos(), format!("expected `{s}`, found {}", c.peek()))
    }
}

fn expect_ident(c: &mut Cursor) -> Result<String> {
    match c.next() {
        Token { tok: Tok::Ident(s), .. } => Ok(s),
        t => err(t.pos, format!("expected a name, found {}", t.tok)),
    }
}

use crate::lex::Token;

fn flip(d: Decision) -> Decision {
    match d {
        Decision::Authorized => Decision::Denied,
        _ => Decision::Authorized,
    }
}

fn parse_rule(c: &mut Cursor) -> Result<Rule> {
    if c.is_sym("!") {
        return parse_negated(c);
    }
    if c.is_sym("[") {
        return parse_bracketed(c);
    }
    let pos = c.pos();
    let chain = parse_chain(c)?;
    if c.eat_ident("precedes") {
        if chain.len() != 1 {
            return err(pos, "`precedes` takes a single guard event");
        }
        let target = parse_event(c)?;
        let guard = chain.into_iter().next().expect("one event");
        return Ok(Rule::Precedence { guard, target });
    }
    if c.eat_sym("=>") {
        let mut forbidden = parse_event(c)?;
        forbidden.decision = flip(forbidden.decision);
        let reset = parse_unless(c)?;
        return Ok(Rule::Response { antecedents: chain, forbidden, reset });
    }
    if chain.len() != 1 {
        return err(c.pos(), "a sequence needs `=>` and a consequence");
    }
    let mut forbidden = chain.into_iter().next().expect("one event");
    forbidden.decision = flip(forbidden.decision);
    while c.eat_sym(",") {
        let vpos = c.pos();
        let var = expect_ident(c)?;
        expect_sym(c, "=")?;
        let Term::Lit(value) = parse_term(c)? else {
            return err(vpos, "side condition must bind a variable to a literal");
        };
        forbidden.substitute(&var, &value);
    }
    let reset = parse_unless(c)?;
    Ok(Rule::Response { antecedents: Vec::new(), forbidden, reset })
}

fn parse_unless(c: &mut Cursor) -> Result<Option<EventPattern>> {
    if c.eat_ident("unless") {
        Ok(Some(parse_event(c)?))
    } else {
        Ok(None)
    }
}

fn parse_negated(c: &mut Cursor) -> Result<Rule> {
    expect_sym(c, "!")?;
    expect_sym(c, "(")?;
    let antecedents = parse_chain(c)?;
    expect_sym(c, "=>")?;
    let forbidden = parse_event(c)?;
    expect_sym(c, ")")?;
    let reset = parse_unless(c)?;
    Ok(Rule::Response { antecedents, forbidden, reset })
}

fn parse_chain(c: &mut Cursor) -> Result<Vec<EventPattern>> {
    let mut out = vec![parse_event(c)?];
    while c.eat_sym("->") {
        out.push(parse_event(c)?);
    }
    Ok(out)
}

fn parse_bracketed(c: &mut Cursor) -> Result<Rule> {
    let pos = c.pos();
    expect_sym(c, "[")?;
    let inner = parse_chain(c)?;
    expect_sym(c, "]")?;
    expect_sym(c, "^")?;
    let count = match c.next() {
        Token { tok: Tok::Int(v), .. } if v >= 1 => v,
        t => return err(t.pos, format!("expected a positive repetition count, found {}", t.tok)),
    };
    if c.eat_sym("=>") {
        let [repeated] = inner.as_slice() else {
            return err(pos, "a repeated denial takes exactly one event");
        };
        let consequence = parse_event(c)?;
        if repeated.decision != Decision::Denied || consequence.decision != Decision::Denied {
            return err(pos, "repeated-denial rules need `^D` on both events");
        }
        if repeated.action != consequence.action {
            return err(pos, "repeated-denial rules must name one action");
        }
        let threshold =
            u32::try_from(count).map_err(|_| NotationError::Syntax { pos, msg: "count too large".into() })?;
        return Ok(Rule::ThreeStrikes { action: repeated.action.clone(), threshold });
    }
    expect_sym(c, "->")?;
    parse_accumulation(c, pos, inner)
}

fn var_of(t: &Term) -> Option<&str> {
    match t {
        Term::Var(v) => Some(v),
        _ => None,
    }
}

fn key_with_var<'p>(p: &'p EventPattern, var: &str) -> Option<&'p str> {
    p.params.iter().find(|(_, t)| var_of(t) == Some(var)).map(|(k, _)| k.as_str())
}

fn parse_accumulation(c: &mut Cursor, pos: Pos, inner: Vec<EventPattern>) -> Result<Rule> {
    let [forms, auth] = inner.as_slice() else {
        return err(pos, "the repeated pair must be `forms -> auth`");
    };
    let forms_k = parse_event(c)?;
    expect_sym(c, "=>")?;
    let auth_k = parse_event(c)?;
    if forms_k.action != forms.action || auth_k.action != auth.action {
        return err(pos, "the final pair must repeat the bracketed actions");
    }
    if [forms, auth, &forms_k].iter().any(|e| e.decision != Decision::Authorized) || auth_k.decision != Decision::Denied
    {
        return err(pos, "accumulation rules need `^A` on the pair and `^D` on the consequence");
    }
    let link = forms
        .params
        .iter()
        .find_map(|(k, t)| {
            let v = var_of(t)?;
            (key_with_var(auth, v) == Some(k.as_str())).then(|| k.clone())
        })
        .ok_or_else(|| NotationError::Syntax { pos, msg: "no key links the bracketed forms and auth".into() })?;

    expect_sym(c, ",")?;
    let dpos = c.pos();
    let dest_var = expect_ident(c)?;
    let filter = if c.eat_ident("in") {
        DestFilter::Registered
    } else if c.eat_ident("notin") {
        DestFilter::Unregistered
    } else {
        return err(c.pos(), format!("expected `in` or `notin`, found {}", c.peek()));
    };
    let set_var = expect_ident(c)?;
    if !c.eat_ident("and") {
        expect_sym(c, "&&")?;
    }
    let vpos = c.pos();
    let value_var = expect_ident(c)?;
    expect_sym(c, "+")?;
    if !c.eat_ident("sum") {
        return err(c.pos(), "expected `sum(...)`");
    }
    skip_group(c)?;
    expect_sym(c, ">")?;
    let limit = match parse_term(c)? {
        Term::Lit(ParamValue::Int(v)) => v,
        _ => return err(c.pos(), "limit must be an integer"),
    };
    expect_sym(c, ":")?;
    expect_sym(c, "(")?;
    let registry_key = match c.next() {
        Token { tok: Tok::Str(s), .. } => s,
        t => return err(t.pos, format!("expected the registry key string, found {}", t.tok)),
    };
    expect_sym(c, ",")?;
    let rpos = c.pos();
    if expect_ident(c)? != set_var {
        return err(rpos, format!("registry clause must define {set_var}"));
    }
    expect_sym(c, ")")?;
    if !c.eat_ident("in") {
        return err(c.pos(), "expected `in P_TA(task, account)`");
    }
    if !c.eat_ident("P_TA") {
        return err(c.pos(), "expected `P_TA(task, account)`");
    }
    expect_sym(c, "(")?;
    let registry_task = expect_ident(c)?;
    expect_sym(c, ",")?;
    expect_ident(c)?;
    expect_sym(c, ")")?;

    let dest_key = key_with_var(&forms_k, &dest_var).ok_or_else(|| NotationError::Syntax {
        pos: dpos,
        msg: format!("{dest_var} is not a parameter of the final forms event"),
    })?;
    let value_key = key_with_var(&forms_k, &value_var).ok_or_else(|| NotationError::Syntax {
        pos: vpos,
        msg: format!("{value_var} is not a parameter of the final forms event"),
    })?;
    Ok(Rule::Accumulation {
        forms: forms.action.clone(),
        auth: auth.action.clone(),
        link_key: link,
        value_key: value_key.to_string(),
        dest_key: dest_key.to_string(),
        registry_task: registry_task.as_str().into(),
        registry_key,
        filter,
        limit,
    })
}

/// Skips a balanced parenthesised group; the sum's body restates the
/// filter and carries no extra information.
fn skip_group(c: &mut Cursor) -> Result<()> {
    expect_sym(c, "(")?;
    let mut depth = 1;
    while depth > 0 {
        match c.next().tok {
            Tok::Sym("(") => depth += 1,
            Tok::Sym(")") => depth -= 1,
            Tok::Eof => return err(c.pos(), "unbalanced parentheses"),
            _ => {}
        }
    }
    Ok(())
}

fn parse_event(c: &mut Cursor) -> Result<EventPattern> {
    let pos = c.pos();
    let (user, account) = if c.eat_sym("(") {
        let u = parse_term(c)?;
        expect_sym(c, ",")?;
        let a = parse_term(c)?;
        expect_sym(c, ")")?;
        (u, a)
    } else {
        (Term::Var("u".into()), Term::Var("a".into()))
    };
    let action = match c.next() {
        Token { tok: Tok::Str(s), .. } | Token { tok: Tok::Ident(s), .. } => s,
        t => return err(t.pos, format!("expected an action name, found {}", t.tok)),
    };
    let mut params: Vec<(String, Term)> = Vec::new();
    let mut decision = None;
    loop {
        if c.is_sym("^") || (c.is_sym("(") && matches!(c.peek_at(1), Tok::Sym("^"))) {
            let paren = c.eat_sym("(");
            c.next();
            let dpos = c.pos();
            let d = match expect_ident(c)?.as_str() {
                "A" => Decision::Authorized,
                "D" => Decision::Denied,
                other => return err(dpos, format!("decision must be A or D, found {other}")),
            };
            if paren {
                expect_sym(c, ")")?;
            }
            if decision.replace(d).is_some() {
                return err(dpos, "event has two decisions");
            }
        } else if c.eat_sym("(") {
            loop {
                let kpos = c.pos();
                let key = match c.next().tok {
                    Tok::Ident(s) | Tok::Str(s) => s,
                    t => return err(kpos, format!("expected a parameter key, found {t}")),
                };
                expect_sym(c, "=")?;
                let t = parse_term(c)?;
                if params.iter().any(|(k, _)| *k == key) {
                    return err(kpos, format!("parameter {key} constrained twice"));
                }
                params.push((key, t));
                if !c.eat_sym(",") {
                    break;
                }
            }
            expect_sym(c, ")")?;
        } else {
            break;
        }
    }
    let Some(decision) = decision else {
        return err(pos, format!("event {action:?} has no decision"));
    };
    Ok(EventPattern { user, account, action: action.as_str().into(), params, decision })
}

fn parse_term(c: &mut Cursor) -> Result<Term> {
    let t = c.next();
    Ok(match t.tok {
        Tok::Ident(s) if s == "_" => Term::Any,
        Tok::Ident(s) => Term::Var(s),
        Tok::Str(s) => Term::Lit(ParamValue::Text(s)),
        Tok::Int(v) => Term::Lit(ParamValue::Int(v)),
        Tok::Sym("-") => match c.next().tok {
            Tok::Int(v) => Term::Lit(ParamValue::Int(-v)),
            other => return err(t.pos, format!("expected an integer after `-`, found {other}")),
        },
        Tok::Sym("$") => match c.next().tok {
            Tok::Int(v) => match v.checked_mul(100) {
                Some(cents) => Term::Lit(ParamValue::Int(cents)),
                None => return err(t.pos, "amount out of range"),
            },
            other => return err(t.pos, format!("expected an amount after `$`, found {other}")),
        },
        other => return err(t.pos, format!("expected a term, found {other}")),
    })
}
