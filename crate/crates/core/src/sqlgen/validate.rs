//! Allow-list validator for the SQL subset generated queries may use.
//!
//! The statement is tokenized and parsed into a small AST, every table and
//! column is resolved against the [`SchemaCatalog`], and the SQL that is
//! eventually executed is rendered back from that AST. Nothing outside the
//! grammar below survives the round trip:
//!
//! ```text
//! SELECT [DISTINCT] operand [[AS] alias], ...
//! FROM table [[AS] alias]
//! { [INNER] JOIN table [[AS] alias] ON operand = operand {AND operand = operand} }
//! [WHERE predicate {AND|OR predicate}]      -- =, IN (list), LIKE, parentheses
//! [ORDER BY operand [ASC|DESC], ...]
//! [LIMIT integer] [;]
//! ```

use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::kg::{SchemaCatalog, TableDef};

pub const DEFAULT_ROW_CAP: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("empty statement")]
    Empty,
    #[error("multiple statements are not allowed")]
    MultipleStatements,
    #[error("only SELECT statements are allowed, found {0}")]
    NotSelect(String),
    #[error("unknown table \"{0}\"")]
    UnknownTable(String),
    #[error("unknown table or alias \"{0}\"")]
    UnknownQualifier(String),
    #[error("unknown column \"{0}\"")]
    UnknownColumn(String),
    #[error("ambiguous column \"{0}\"; qualify it with a table alias")]
    AmbiguousColumn(String),
    #[error("duplicate table alias \"{0}\"")]
    DuplicateAlias(String),
    #[error("unsupported construct: {0}")]
    Unsupported(String),
    #[error("syntax error: {0}")]
    Syntax(String),
}

/// SQL that passed [`validate_sql`], rendered from the validated AST.
/// Only this type can be handed to the executor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidatedSql {
    sql: String,
    limit_appended: bool,
}

impl ValidatedSql {
    pub fn as_str(&self) -> &str {
        &self.sql
    }

    /// Whether the row cap was added because the statement had no LIMIT.
    pub fn limit_appended(&self) -> bool {
        self.limit_appended
    }
}

impl fmt::Display for ValidatedSql {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.sql)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    QuotedIdent(String),
    Str(String),
    Num(String),
    Sym(&'static str),
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Word(w) => write!(f, "{w}"),
            Tok::QuotedIdent(w) => write!(f, "\"{w}\""),
            Tok::Str(s) => write!(f, "'{s}'"),
            Tok::Num(n) => write!(f, "{n}"),
            Tok::Sym(s) => write!(f, "{s}"),
        }
    }
}

const SYMBOLS: &[&str] = &[
    "<>", "!=", "<=", ">=", "||", "==", ",", ".", "(", ")", "=", "*", ";", "<", ">", "+", "-", "/",
    "%",
];

fn tokenize(sql: &str) -> Result<Vec<Tok>, ValidationError> {
    let chars: Vec<char> = sql.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '-' && chars.get(i + 1) == Some(&'-') {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
        } else if c == '/' && chars.get(i + 1) == Some(&'*') {
            i += 2;
            loop {
                if i + 1 >= chars.len() {
                    return Err(ValidationError::Syntax("unterminated comment".into()));
                }
                if chars[i] == '*' && chars[i + 1] == '/' {
                    i += 2;
                    break;
                }
                i += 1;
            }
        } else if c == '\'' || c == '"' || c == '`' {
            let quote = c;
            let mut text = String::new();
            i += 1;
            loop {
                match chars.get(i) {
                    None => {
                        return Err(ValidationError::Syntax(format!(
                            "unterminated quoted text starting with {quote}"
                        )))
                    }
                    Some(&ch) if ch == quote => {
                        if chars.get(i + 1) == Some(&quote) {
                            text.push(quote);
                            i += 2;
                        } else {
                            i += 1;
                            break;
                        }
                    }
                    Some(&ch) => {
                        text.push(ch);
                        i += 1;
                    }
                }
            }
            tokens.push(if quote == '\'' {
                Tok::Str(text)
            } else {
                Tok::QuotedIdent(text)
            });
        } else if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                return Err(ValidationError::Syntax(format!(
                    "malformed number near `{}`",
                    chars[start..=i].iter().collect::<String>()
                )));
            }
            tokens.push(Tok::Num(chars[start..i].iter().collect()));
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            tokens.push(Tok::Word(chars[start..i].iter().collect()));
        } else {
            let rest: String = chars[i..chars.len().min(i + 2)].iter().collect();
            match SYMBOLS.iter().find(|s| rest.starts_with(**s)) {
                Some(sym) => {
                    tokens.push(Tok::Sym(sym));
                    i += sym.chars().count();
                }
                None => {
                    return Err(ValidationError::Syntax(format!("unexpected character `{c}`")))
                }
            }
        }
    }
    Ok(tokens)
}

/// Words with a role in the grammar, plus words that start constructs
/// outside it. Neither may be used as an alias.
const KEYWORDS: &[&str] = &[
    "SELECT", "DISTINCT", "FROM", "AS", "INNER", "JOIN", "ON", "WHERE", "AND", "OR", "IN", "LIKE",
    "ORDER", "BY", "ASC", "DESC", "LIMIT", "ALL", "LEFT", "RIGHT", "FULL", "OUTER", "CROSS",
    "NATURAL", "USING", "UNION", "INTERSECT", "EXCEPT", "GROUP", "HAVING", "OFFSET", "NOT", "IS",
    "NULL", "BETWEEN", "CASE", "WHEN", "THEN", "ELSE", "END", "EXISTS", "WITH", "INSERT",
    "UPDATE", "DELETE", "DROP", "CREATE", "ALTER", "ATTACH", "DETACH", "PRAGMA", "REPLACE",
    "VACUUM", "REINDEX", "ANALYZE", "BEGIN", "COMMIT", "ROLLBACK", "SAVEPOINT", "RELEASE",
    "TRUNCATE", "INTO", "VALUES", "SET", "WINDOW", "OVER", "COLLATE", "ESCAPE", "GLOB", "MATCH",
    "REGEXP", "CAST", "RECURSIVE", "EXPLAIN", "TABLE", "INDEX", "VIEW", "TRIGGER",
];

fn is_keyword(word: &str) -> bool {
    KEYWORDS.iter().any(|k| k.eq_ignore_ascii_case(word))
}

fn is_plain_identifier(word: &str) -> bool {
    let mut chars = word.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

#[derive(Debug, Clone, PartialEq)]
enum Operand {
    Column {
        qualifier: Option<String>,
        name: String,
    },
    Str(String),
    Num(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Expr {
    And(Vec<Expr>),
    Or(Vec<Expr>),
    Eq(Operand, Operand),
    In(Operand, Vec<Operand>),
    Like(Operand, Operand),
}

#[derive(Debug, Clone)]
struct TableRef {
    table: String,
    alias: Option<String>,
}

#[derive(Debug, Clone)]
struct SelectItem {
    expr: Operand,
    alias: Option<String>,
}

#[derive(Debug, Clone)]
struct OrderItem {
    expr: Operand,
    descending: Option<bool>,
}

#[derive(Debug, Clone)]
struct Select {
    distinct: bool,
    items: Vec<SelectItem>,
    from: TableRef,
    joins: Vec<(TableRef, Vec<(Operand, Operand)>)>,
    filter: Option<Expr>,
    order_by: Vec<OrderItem>,
    limit: Option<u64>,
}

struct Parser {
    tokens: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos)
    }

    fn peek_at(&self, offset: usize) -> Option<&Tok> {
        self.tokens.get(self.pos + offset)
    }

    fn next(&mut self) -> Option<Tok> {
        let tok = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        tok
    }

    fn at_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Tok::Word(w)) if w.eq_ignore_ascii_case(kw))
    }

    fn eat_keyword(&mut self, kw: &str) -> bool {
        if self.at_keyword(kw) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<(), ValidationError> {
        if self.eat_keyword(kw) {
            Ok(())
        } else {
            Err(self.unexpected(&format!("expected {kw}")))
        }
    }

    fn at_sym(&self, sym: &str) -> bool {
        matches!(self.peek(), Some(Tok::Sym(s)) if *s == sym)
    }

    fn eat_sym(&mut self, sym: &str) -> bool {
        if self.at_sym(sym) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, sym: &str) -> Result<(), ValidationError> {
        if self.eat_sym(sym) {
            Ok(())
        } else {
            Err(self.unexpected(&format!("expected `{sym}`")))
        }
    }

    /// Error for the current token: constructs outside the subset are
    /// reported as unsupported, anything else as a syntax error.
    fn unexpected(&self, context: &str) -> ValidationError {
        match self.peek() {
            None => ValidationError::Syntax(format!("{context}, found end of statement")),
            Some(Tok::Word(w)) if is_keyword(w) => {
                ValidationError::Unsupported(w.to_ascii_uppercase())
            }
            Some(Tok::Sym(s)) if matches!(*s, "<>" | "!=" | "<=" | ">=" | "<" | ">" | "==") => {
                ValidationError::Unsupported(format!("operator {s}"))
            }
            Some(Tok::Sym(s)) if matches!(*s, "||" | "+" | "-" | "/" | "%") => {
                ValidationError::Unsupported(format!("arithmetic operator {s}"))
            }
            Some(tok) => ValidationError::Syntax(format!("{context}, found `{tok}`")),
        }
    }

    fn identifier(&mut self, what: &str) -> Result<String, ValidationError> {
        match self.peek() {
            Some(Tok::Word(w)) if !is_keyword(w) => {
                let w = w.clone();
                self.pos += 1;
                Ok(w)
            }
            Some(Tok::QuotedIdent(w)) => {
                let w = w.clone();
                self.pos += 1;
                Ok(w)
            }
            _ => Err(self.unexpected(&format!("expected {what}"))),
        }
    }

    fn optional_alias(&mut self) -> Result<Option<String>, ValidationError> {
        let explicit = self.eat_keyword("AS");
        match self.peek() {
            Some(Tok::Word(w)) if !is_keyword(w) => {
                let w = w.clone();
                self.pos += 1;
                if !is_plain_identifier(&w) {
                    return Err(ValidationError::Syntax(format!("invalid alias `{w}`")));
                }
                Ok(Some(w))
            }
            _ if explicit => Err(self.unexpected("expected alias after AS")),
            _ => Ok(None),
        }
    }

    fn operand(&mut self) -> Result<Operand, ValidationError> {
        match self.peek().cloned() {
            Some(Tok::Str(s)) => {
                self.pos += 1;
                Ok(Operand::Str(s))
            }
            Some(Tok::Num(n)) => {
                self.pos += 1;
                Ok(Operand::Num(n))
            }
            Some(Tok::Sym("*")) => Err(ValidationError::Unsupported(
                "`*`; list the columns explicitly".into(),
            )),
            Some(Tok::Sym("(")) if matches!(self.peek_at(1), Some(Tok::Word(w)) if w.eq_ignore_ascii_case("SELECT")) => {
                Err(ValidationError::Unsupported("subquery".into()))
            }
            Some(Tok::Word(_)) | Some(Tok::QuotedIdent(_)) => {
                if self.at_keyword("SELECT") {
                    return Err(ValidationError::Unsupported("subquery".into()));
                }
                let first = self.identifier("column")?;
                if self.at_sym("(") {
                    return Err(ValidationError::Unsupported(format!(
                        "function call {}(...)",
                        first.to_ascii_uppercase()
                    )));
                }
                if self.eat_sym(".") {
                    if self.at_sym("*") {
                        return Err(ValidationError::Unsupported(
                            "`*`; list the columns explicitly".into(),
                        ));
                    }
                    let name = self.identifier("column name")?;
                    Ok(Operand::Column {
                        qualifier: Some(first),
                        name,
                    })
                } else {
                    Ok(Operand::Column {
                        qualifier: None,
                        name: first,
                    })
                }
            }
            _ => Err(self.unexpected("expected a column or literal")),
        }
    }

    fn table_ref(&mut self) -> Result<TableRef, ValidationError> {
        if self.at_sym("(") {
            return Err(ValidationError::Unsupported("derived table".into()));
        }
        let table = self.identifier("table name")?;
        if self.at_sym(".") {
            return Err(ValidationError::Unsupported("schema-qualified table".into()));
        }
        let alias = self.optional_alias()?;
        Ok(TableRef { table, alias })
    }

    fn or_expr(&mut self) -> Result<Expr, ValidationError> {
        let mut parts = vec![self.and_expr()?];
        while self.eat_keyword("OR") {
            parts.push(self.and_expr()?);
        }
        Ok(if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            Expr::Or(parts)
        })
    }

    fn and_expr(&mut self) -> Result<Expr, ValidationError> {
        let mut parts = vec![self.predicate()?];
        while self.eat_keyword("AND") {
            parts.push(self.predicate()?);
        }
        Ok(if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            Expr::And(parts)
        })
    }

    fn predicate(&mut self) -> Result<Expr, ValidationError> {
        if self.at_sym("(")
            && !matches!(self.peek_at(1), Some(Tok::Word(w)) if w.eq_ignore_ascii_case("SELECT"))
        {
            self.pos += 1;
            let inner = self.or_expr()?;
            self.expect_sym(")")?;
            return Ok(inner);
        }
        let lhs = self.operand()?;
        if self.eat_sym("=") {
            return Ok(Expr::Eq(lhs, self.operand()?));
        }
        if self.eat_keyword("IN") {
            self.expect_sym("(")?;
            let mut list = vec![self.operand()?];
            while self.eat_sym(",") {
                list.push(self.operand()?);
            }
            self.expect_sym(")")?;
            return Ok(Expr::In(lhs, list));
        }
        if self.eat_keyword("LIKE") {
            let pattern = self.operand()?;
            if self.at_keyword("ESCAPE") {
                return Err(ValidationError::Unsupported("ESCAPE".into()));
            }
            return Ok(Expr::Like(lhs, pattern));
        }
        Err(self.unexpected("expected =, IN or LIKE"))
    }

    fn join_condition(&mut self) -> Result<Vec<(Operand, Operand)>, ValidationError> {
        let mut conditions = Vec::new();
        loop {
            let lhs = self.operand()?;
            if !self.eat_sym("=") {
                return Err(match self.unexpected("join conditions must be equalities") {
                    ValidationError::Syntax(_) => ValidationError::Unsupported(
                        "join condition other than equality".into(),
                    ),
                    other => other,
                });
            }
            conditions.push((lhs, self.operand()?));
            if !self.eat_keyword("AND") {
                break;
            }
        }
        if self.at_keyword("OR") {
            return Err(ValidationError::Unsupported("OR in join condition".into()));
        }
        Ok(conditions)
    }

    fn select(&mut self) -> Result<Select, ValidationError> {
        self.expect_keyword("SELECT")?;
        let distinct = self.eat_keyword("DISTINCT");
        if self.at_keyword("ALL") {
            self.pos += 1;
        }
        let mut items = Vec::new();
        loop {
            let expr = self.operand()?;
            let alias = self.optional_alias()?;
            items.push(SelectItem { expr, alias });
            if !self.eat_sym(",") {
                break;
            }
        }
        if !self.eat_keyword("FROM") {
            return Err(self.unexpected("expected FROM"));
        }
        let from = self.table_ref()?;
        if self.at_sym(",") {
            return Err(ValidationError::Unsupported(
                "comma join; use INNER JOIN ... ON".into(),
            ));
        }
        let mut joins = Vec::new();
        loop {
            let inner = self.eat_keyword("INNER");
            if !self.eat_keyword("JOIN") {
                if inner {
                    return Err(self.unexpected("expected JOIN"));
                }
                break;
            }
            let table = self.table_ref()?;
            self.expect_keyword("ON")?;
            joins.push((table, self.join_condition()?));
        }
        let filter = if self.eat_keyword("WHERE") {
            Some(self.or_expr()?)
        } else {
            None
        };
        let mut order_by = Vec::new();
        if self.eat_keyword("ORDER") {
            self.expect_keyword("BY")?;
            loop {
                let expr = self.operand()?;
                let descending = if self.eat_keyword("DESC") {
                    Some(true)
                } else if self.eat_keyword("ASC") {
                    Some(false)
                } else {
                    None
                };
                order_by.push(OrderItem { expr, descending });
                if !self.eat_sym(",") {
                    break;
                }
            }
        }
        let limit = if self.eat_keyword("LIMIT") {
            match self.next() {
                Some(Tok::Num(n)) => Some(n.parse::<u64>().map_err(|_| {
                    ValidationError::Syntax(format!("LIMIT expects an integer, found {n}"))
                })?),
                _ => {
                    self.pos -= 1;
                    return Err(self.unexpected("LIMIT expects an integer"));
                }
            }
        } else {
            None
        };
        if self.at_sym(",") || self.at_keyword("OFFSET") {
            return Err(ValidationError::Unsupported("OFFSET".into()));
        }
        while self.eat_sym(";") {}
        if self.peek().is_some() {
            return Err(self.unexpected("expected end of statement"));
        }
        Ok(Select {
            distinct,
            items,
            from,
            joins,
            filter,
            order_by,
            limit,
        })
    }
}

struct Scope<'c> {
    /// (name used to qualify columns, table definition)
    entries: Vec<(String, &'c TableDef)>,
    select_aliases: Vec<String>,
}

impl<'c> Scope<'c> {
    fn build(select: &Select, catalog: &'c SchemaCatalog) -> Result<Self, ValidationError> {
        let mut entries: Vec<(String, &TableDef)> = Vec::new();
        let refs = std::iter::once(&select.from).chain(select.joins.iter().map(|(t, _)| t));
        for table_ref in refs {
            let def = catalog
                .table(&table_ref.table)
                .ok_or_else(|| ValidationError::UnknownTable(table_ref.table.clone()))?;
            let name = table_ref.alias.clone().unwrap_or_else(|| def.name.clone());
            if entries.iter().any(|(n, _)| n.eq_ignore_ascii_case(&name)) {
                return Err(ValidationError::DuplicateAlias(name));
            }
            entries.push((name, def));
        }
        Ok(Scope {
            entries,
            select_aliases: select.items.iter().filter_map(|i| i.alias.clone()).collect(),
        })
    }

    /// Resolves a column operand to its canonical `(qualifier, column)` spelling.
    fn resolve(&self, operand: &Operand, allow_select_alias: bool) -> Result<Operand, ValidationError> {
        let Operand::Column { qualifier, name } = operand else {
            return Ok(operand.clone());
        };
        let canonical_column = |def: &TableDef| {
            def.columns
                .iter()
                .find(|c| c.name.eq_ignore_ascii_case(name))
                .map(|c| c.name.clone())
        };
        match qualifier {
            Some(q) => {
                let (scope_name, def) = self
                    .entries
                    .iter()
                    .find(|(n, _)| n.eq_ignore_ascii_case(q))
                    .ok_or_else(|| ValidationError::UnknownQualifier(q.clone()))?;
                let column = canonical_column(def)
                    .ok_or_else(|| ValidationError::UnknownColumn(name.clone()))?;
                Ok(Operand::Column {
                    qualifier: Some(scope_name.clone()),
                    name: column,
                })
            }
            None => {
                let matches: Vec<(&String, String)> = self
                    .entries
                    .iter()
                    .filter_map(|(n, def)| canonical_column(def).map(|c| (n, c)))
                    .collect();
                match matches.as_slice() {
                    [(_, column)] => Ok(Operand::Column {
                        qualifier: None,
                        name: column.clone(),
                    }),
                    [] if allow_select_alias
                        && self.select_aliases.iter().any(|a| a.eq_ignore_ascii_case(name)) =>
                    {
                        Ok(operand.clone())
                    }
                    [] => Err(ValidationError::UnknownColumn(name.clone())),
                    _ => Err(ValidationError::AmbiguousColumn(name.clone())),
                }
            }
        }
    }

    fn resolve_expr(&self, expr: &Expr) -> Result<Expr, ValidationError> {
        Ok(match expr {
            Expr::And(parts) => Expr::And(
                parts
                    .iter()
                    .map(|p| self.resolve_expr(p))
                    .collect::<Result<_, _>>()?,
            ),
            Expr::Or(parts) => Expr::Or(
                parts
                    .iter()
                    .map(|p| self.resolve_expr(p))
                    .collect::<Result<_, _>>()?,
            ),
            Expr::Eq(a, b) => Expr::Eq(self.resolve(a, false)?, self.resolve(b, false)?),
            Expr::Like(a, b) => Expr::Like(self.resolve(a, false)?, self.resolve(b, false)?),
            Expr::In(a, list) => Expr::In(
                self.resolve(a, false)?,
                list.iter()
                    .map(|o| self.resolve(o, false))
                    .collect::<Result<_, _>>()?,
            ),
        })
    }
}

fn quote_str(s: &str) -> String {
    format!("'{}'", s.replace('\'', "''"))
}

fn render_operand(out: &mut String, operand: &Operand) {
    match operand {
        Operand::Column {
            qualifier: Some(q),
            name,
        } => write!(out, "{q}.{name}").unwrap(),
        Operand::Column {
            qualifier: None,
            name,
        } => out.push_str(name),
        Operand::Str(s) => out.push_str(&quote_str(s)),
        Operand::Num(n) => out.push_str(n),
    }
}

fn render_expr(out: &mut String, expr: &Expr, inside_and: bool) {
    match expr {
        Expr::And(parts) => {
            for (i, p) in parts.iter().enumerate() {
                if i > 0 {
                    out.push_str(" AND ");
                }
                render_expr(out, p, true);
            }
        }
        Expr::Or(parts) => {
            if inside_and {
                out.push('(');
            }
            for (i, p) in parts.iter().enumerate() {
                if i > 0 {
                    out.push_str(" OR ");
                }
                render_expr(out, p, false);
            }
            if inside_and {
                out.push(')');
            }
        }
        Expr::Eq(a, b) => {
            render_operand(out, a);
            out.push_str(" = ");
            render_operand(out, b);
        }
        Expr::Like(a, b) => {
            render_operand(out, a);
            out.push_str(" LIKE ");
            render_operand(out, b);
        }
        Expr::In(a, list) => {
            render_operand(out, a);
            out.push_str(" IN (");
            for (i, o) in list.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                render_operand(out, o);
            }
            out.push(')');
        }
    }
}

fn render_table(out: &mut String, table: &TableRef, catalog: &SchemaCatalog) {
    let canonical = catalog
        .table(&table.table)
        .map(|t| t.name.as_str())
        .unwrap_or(&table.table);
    out.push_str(canonical);
    if let Some(alias) = &table.alias {
        write!(out, " AS {alias}").unwrap();
    }
}

/// Validates `sql` against the allowed subset and the catalog. A LIMIT of
/// `row_cap` is appended when the statement has none.
pub fn validate_sql(
    sql: &str,
    catalog: &SchemaCatalog,
    row_cap: usize,
) -> Result<ValidatedSql, ValidationError> {
    let tokens = tokenize(sql)?;
    if tokens.is_empty() {
        return Err(ValidationError::Empty);
    }
    if let Some(pos) = tokens.iter().position(|t| *t == Tok::Sym(";")) {
        if tokens[pos + 1..].iter().any(|t| *t != Tok::Sym(";")) {
            return Err(ValidationError::MultipleStatements);
        }
    }
    match &tokens[0] {
        Tok::Word(w) if w.eq_ignore_ascii_case("SELECT") => {}
        Tok::Word(w) if w.eq_ignore_ascii_case("WITH") => {
            return Err(ValidationError::Unsupported("WITH".into()))
        }
        Tok::Word(w) => return Err(ValidationError::NotSelect(w.to_ascii_uppercase())),
        other => return Err(ValidationError::NotSelect(other.to_string())),
    }

    let mut parser = Parser { tokens, pos: 0 };
    let select = parser.select()?;
    let scope = Scope::build(&select, catalog)?;

    let items: Vec<SelectItem> = select
        .items
        .iter()
        .map(|item| {
            Ok(SelectItem {
                expr: scope.resolve(&item.expr, false)?,
                alias: item.alias.clone(),
            })
        })
        .collect::<Result<_, ValidationError>>()?;
    let joins: Vec<(TableRef, Vec<(Operand, Operand)>)> = select
        .joins
        .iter()
        .map(|(t, conds)| {
            let conds = conds
                .iter()
                .map(|(a, b)| Ok((scope.resolve(a, false)?, scope.resolve(b, false)?)))
                .collect::<Result<_, ValidationError>>()?;
            Ok((t.clone(), conds))
        })
        .collect::<Result<_, ValidationError>>()?;
    let filter = select
        .filter
        .as_ref()
        .map(|f| scope.resolve_expr(f))
        .transpose()?;
    let order_by: Vec<OrderItem> = select
        .order_by
        .iter()
        .map(|o| {
            Ok(OrderItem {
                expr: scope.resolve(&o.expr, true)?,
                descending: o.descending,
            })
        })
        .collect::<Result<_, ValidationError>>()?;

    let mut out = String::from("SELECT ");
    if select.distinct {
        out.push_str("DISTINCT ");
    }
    for (i, item) in items.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        render_operand(&mut out, &item.expr);
        if let Some(alias) = &item.alias {
            write!(out, " AS {alias}").unwrap();
        }
    }
    out.push_str(" FROM ");
    render_table(&mut out, &select.from, catalog);
    for (table, conds) in &joins {
        out.push_str(" JOIN ");
        render_table(&mut out, table, catalog);
        out.push_str(" ON ");
        for (i, (a, b)) in conds.iter().enumerate() {
            if i > 0 {
                out.push_str(" AND ");
            }
            render_operand(&mut out, a);
            out.push_str(" = ");
            render_operand(&mut out, b);
        }
    }
    if let Some(filter) = &filter {
        out.push_str(" WHERE ");
        render_expr(&mut out, filter, false);
    }
    if !order_by.is_empty() {
        out.push_str(" ORDER BY ");
        for (i, o) in order_by.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            render_operand(&mut out, &o.expr);
            match o.descending {
                Some(true) => out.push_str(" DESC"),
                Some(false) => out.push_str(" ASC"),
                None => {}
            }
        }
    }
    let limit_appended = select.limit.is_none();
    let limit = select.limit.unwrap_or(row_cap as u64);
    write!(out, " LIMIT {limit}").unwrap();

    Ok(ValidatedSql {
        sql: out,
        limit_appended,
    })
}
