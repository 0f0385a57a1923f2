//! SQL digesting: literal values become `?` placeholders and each resulting
//! template gets a stable 64-bit [`SqlId`].
//!
//! The lexer is deliberately shallow. It understands quoting, numbers,
//! comments and operators well enough to normalize a statement, and the
//! statement kind and referenced tables are recovered by scanning the token
//! stream rather than by parsing a grammar.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fnv;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum StatementKind {
    Select,
    Insert,
    Update,
    Delete,
    Replace,
    Create,
    Alter,
    Drop,
    Truncate,
    Other,
}

impl StatementKind {
    fn from_keyword(word: &str) -> Self {
        match word.to_ascii_uppercase().as_str() {
            "SELECT" => Self::Select,
            "INSERT" => Self::Insert,
            "UPDATE" => Self::Update,
            "DELETE" => Self::Delete,
            "REPLACE" => Self::Replace,
            "CREATE" => Self::Create,
            "ALTER" => Self::Alter,
            "DROP" => Self::Drop,
            "TRUNCATE" => Self::Truncate,
            _ => Self::Other,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Select => "SELECT",
            Self::Insert => "INSERT",
            Self::Update => "UPDATE",
            Self::Delete => "DELETE",
            Self::Replace => "REPLACE",
            Self::Create => "CREATE",
            Self::Alter => "ALTER",
            Self::Drop => "DROP",
            Self::Truncate => "TRUNCATE",
            Self::Other => "OTHER",
        }
    }

    pub fn is_dml_write(&self) -> bool {
        matches!(
            self,
            Self::Insert | Self::Update | Self::Delete | Self::Replace
        )
    }

    pub fn is_ddl(&self) -> bool {
        matches!(
            self,
            Self::Create | Self::Alter | Self::Drop | Self::Truncate
        )
    }
}

impl fmt::Display for StatementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A normalized query with literals replaced by `?`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqlTemplate {
    pub text: String,
    pub statement_kind: StatementKind,
    /// Referenced tables in order of first appearance, as written
    /// (`db.table` when qualified, without backticks).
    pub tables: Vec<String>,
    pub database: Option<String>,
}

impl SqlTemplate {
    pub fn sql_id(&self) -> SqlId {
        sql_id(self)
    }
}

/// FNV-1a 64 of the template text, rendered as 16 lowercase hex digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SqlId(pub u64);

impl SqlId {
    pub fn of_text(text: &str) -> Self {
        SqlId(fnv::hash(text.as_bytes()))
    }
}

impl fmt::Display for SqlId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl FromStr for SqlId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.len() != 16 {
            return Err(Error::InvalidValue {
                field: "sql_id".into(),
                reason: format!("expected 16 hex digits, got {s:?}"),
            });
        }
        u64::from_str_radix(s, 16)
            .map(SqlId)
            .map_err(|e| Error::InvalidValue {
                field: "sql_id".into(),
                reason: e.to_string(),
            })
    }
}

impl Serialize for SqlId {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SqlId {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn sql_id(template: &SqlTemplate) -> SqlId {
    SqlId::of_text(&template.text)
}

const KEYWORDS: &[&str] = &[
    "ADD",
    "ALL",
    "ALTER",
    "AND",
    "ANY",
    "AS",
    "ASC",
    "BETWEEN",
    "BY",
    "CASE",
    "COLUMN",
    "CREATE",
    "CROSS",
    "DATABASE",
    "DEFAULT",
    "DELETE",
    "DESC",
    "DISTINCT",
    "DROP",
    "DUPLICATE",
    "ELSE",
    "END",
    "EXISTS",
    "FALSE",
    "FOR",
    "FROM",
    "FULL",
    "GROUP",
    "HAVING",
    "IF",
    "IGNORE",
    "IN",
    "INDEX",
    "INNER",
    "INSERT",
    "INTERVAL",
    "INTO",
    "IS",
    "JOIN",
    "KEY",
    "LEFT",
    "LIKE",
    "LIMIT",
    "LOW_PRIORITY",
    "NOT",
    "NULL",
    "OFFSET",
    "ON",
    "OR",
    "ORDER",
    "OUTER",
    "PRIMARY",
    "REPLACE",
    "RIGHT",
    "SCHEMA",
    "SELECT",
    "SET",
    "SOME",
    "TABLE",
    "THEN",
    "TRUE",
    "TRUNCATE",
    "UNION",
    "UNIQUE",
    "UPDATE",
    "USING",
    "VALUES",
    "WHEN",
    "WHERE",
    "WITH",
];

fn is_keyword(word: &str) -> bool {
    let upper = word.to_ascii_uppercase();
    KEYWORDS.binary_search(&upper.as_str()).is_ok()
}

const COMPARISON_OPS: &[&str] = &["=", "==", "<>", "!=", "<", ">", "<=", ">=", "<=>"];

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Word,
    QuotedIdent,
    Literal,
    Placeholder,
    Op,
}

#[derive(Debug, Clone)]
struct Token {
    kind: Kind,
    text: String,
    space_before: bool,
}

impl Token {
    fn is_op(&self, op: &str) -> bool {
        self.kind == Kind::Op && self.text == op
    }

    fn is_keyword(&self, kw: &str) -> bool {
        self.kind == Kind::Word && self.text.eq_ignore_ascii_case(kw)
    }
}

fn is_ident_start(c: char) -> bool {
    c.is_alphabetic() || c == '_' || c == '@' || c == '$'
}

fn is_ident_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '@' || c == '$'
}

fn lex(sql: &str) -> Result<Vec<Token>> {
    let chars: Vec<(usize, char)> = sql.char_indices().collect();
    let n = chars.len();
    let at = |i: usize| chars.get(i).map(|&(_, c)| c);
    let mut tokens = Vec::new();
    let mut i = 0;
    let mut space = false;

    while i < n {
        let c = chars[i].1;
        if c.is_whitespace() {
            space = true;
            i += 1;
            continue;
        }
        // comments
        if (c == '-' && at(i + 1) == Some('-')) || c == '#' {
            while i < n && chars[i].1 != '\n' {
                i += 1;
            }
            space = true;
            continue;
        }
        if c == '/' && at(i + 1) == Some('*') {
            i += 2;
            while i < n && !(chars[i].1 == '*' && at(i + 1) == Some('/')) {
                i += 1;
            }
            i = (i + 2).min(n);
            space = true;
            continue;
        }

        let start = i;
        let kind;
        if c == '\'' || c == '"' {
            i += 1;
            loop {
                match at(i) {
                    None => return Err(Error::UnterminatedString(chars[start].0)),
                    Some('\\') => i += 2,
                    Some(q) if q == c => {
                        if at(i + 1) == Some(c) {
                            i += 2;
                        } else {
                            i += 1;
                            break;
                        }
                    }
                    Some(_) => i += 1,
                }
            }
            kind = Kind::Literal;
        } else if c == '`' {
            i += 1;
            while i < n && chars[i].1 != '`' {
                i += 1;
            }
            if i >= n {
                return Err(Error::UnterminatedString(chars[start].0));
            }
            i += 1;
            kind = Kind::QuotedIdent;
        } else if c.is_ascii_digit() || (c == '.' && at(i + 1).is_some_and(|d| d.is_ascii_digit()))
        {
            if c == '0' && matches!(at(i + 1), Some('x') | Some('X')) {
                i += 2;
                while at(i).is_some_and(|d| d.is_ascii_hexdigit()) {
                    i += 1;
                }
            } else {
                while at(i).is_some_and(|d| d.is_ascii_digit()) {
                    i += 1;
                }
                if at(i) == Some('.') {
                    i += 1;
                    while at(i).is_some_and(|d| d.is_ascii_digit()) {
                        i += 1;
                    }
                }
                if matches!(at(i), Some('e') | Some('E')) {
                    let mut j = i + 1;
                    if matches!(at(j), Some('+') | Some('-')) {
                        j += 1;
                    }
                    if at(j).is_some_and(|d| d.is_ascii_digit()) {
                        i = j;
                        while at(i).is_some_and(|d| d.is_ascii_digit()) {
                            i += 1;
                        }
                    }
                }
            }
            // 123abc is an identifier in most dialects
            if at(i).is_some_and(is_ident_char) {
                while at(i).is_some_and(is_ident_char) {
                    i += 1;
                }
                kind = Kind::Word;
            } else {
                kind = Kind::Literal;
            }
        } else if is_ident_start(c) {
            while i < n {
                let d = chars[i].1;
                if is_ident_char(d) {
                    i += 1;
                } else if d == '.'
                    && at(i + 1).is_some_and(|e| is_ident_start(e) || e == '`' || e == '*')
                {
                    i += 1;
                    if chars[i].1 == '`' {
                        i += 1;
                        while i < n && chars[i].1 != '`' {
                            i += 1;
                        }
                        i = (i + 1).min(n);
                    } else if chars[i].1 == '*' {
                        i += 1;
                        break;
                    }
                } else {
                    break;
                }
            }
            kind = Kind::Word;
        } else if c == '?' {
            i += 1;
            kind = Kind::Placeholder;
        } else {
            let three: String = chars[i..(i + 3).min(n)].iter().map(|&(_, c)| c).collect();
            let two: String = chars[i..(i + 2).min(n)].iter().map(|&(_, c)| c).collect();
            if three == "<=>" {
                i += 3;
            } else if ["<=", ">=", "<>", "!=", "==", ":=", "||", "&&"].contains(&two.as_str()) {
                i += 2;
            } else {
                i += 1;
            }
            kind = Kind::Op;
        }

        let end = chars.get(i).map_or(sql.len(), |&(b, _)| b);
        tokens.push(Token {
            kind,
            text: sql[chars[start].0..end].to_string(),
            space_before: space,
        });
        space = false;
    }
    Ok(tokens)
}

fn placeholder(space_before: bool) -> Token {
    Token {
        kind: Kind::Placeholder,
        text: "?".to_string(),
        space_before,
    }
}

/// Whether a `-`/`+` at this point is a sign rather than a binary operator.
fn sign_position(prev: Option<&Token>) -> bool {
    match prev {
        None => true,
        Some(t) => match t.kind {
            Kind::Op => t.text != ")",
            Kind::Word => is_keyword(&t.text),
            _ => false,
        },
    }
}

fn normalize(tokens: Vec<Token>) -> Vec<Token> {
    let mut out: Vec<Token> = Vec::with_capacity(tokens.len());
    let mut iter = tokens.into_iter().peekable();
    while let Some(tok) = iter.next() {
        match tok.kind {
            Kind::Literal => out.push(placeholder(tok.space_before)),
            Kind::Op
                if (tok.text == "-" || tok.text == "+")
                    && sign_position(out.last())
                    && iter.peek().is_some_and(|t| {
                        t.kind == Kind::Literal && !t.text.starts_with(['\'', '"'])
                    }) =>
            {
                iter.next();
                out.push(placeholder(tok.space_before));
            }
            Kind::Word => {
                let after_comparison = out.last().is_some_and(|p| {
                    p.kind == Kind::Op && COMPARISON_OPS.contains(&p.text.as_str())
                });
                let bare_value = after_comparison
                    && !is_keyword(&tok.text)
                    && !tok.text.contains('.')
                    && !iter.peek().is_some_and(|t| t.is_op("("));
                if bare_value {
                    out.push(placeholder(tok.space_before));
                } else if is_keyword(&tok.text) {
                    out.push(Token {
                        text: tok.text.to_ascii_uppercase(),
                        ..tok
                    });
                } else {
                    out.push(tok);
                }
            }
            _ => out.push(tok),
        }
    }
    out
}

fn render(tokens: &[Token]) -> String {
    let mut text = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 && t.space_before {
            text.push(' ');
        }
        text.push_str(&t.text);
    }
    text
}

fn table_name(tok: &Token) -> Option<String> {
    match tok.kind {
        Kind::QuotedIdent => Some(tok.text.replace('`', "")),
        Kind::Word if !is_keyword(&tok.text) && !tok.text.starts_with('@') => {
            Some(tok.text.replace('`', ""))
        }
        _ => None,
    }
}

fn extract_tables(tokens: &[Token], kind: StatementKind) -> Vec<String> {
    const SKIPPABLE: &[&str] = &[
        "IF",
        "NOT",
        "EXISTS",
        "ONLY",
        "LOW_PRIORITY",
        "IGNORE",
        "TABLE",
    ];
    let index_statement = kind.is_ddl() && tokens.iter().any(|t| t.is_keyword("INDEX"));
    let mut tables: Vec<String> = Vec::new();
    let mut push = |name: String| {
        if !tables.contains(&name) {
            tables.push(name);
        }
    };

    let mut i = 0;
    while i < tokens.len() {
        let t = &tokens[i];
        let introduces_table = t.kind == Kind::Word
            && match t.text.as_str() {
                "FROM" | "JOIN" | "INTO" => true,
                "UPDATE" => i == 0,
                "TABLE" => true,
                "TRUNCATE" => true,
                "ON" => index_statement,
                _ => false,
            };
        if !introduces_table {
            i += 1;
            continue;
        }
        let list = t.text == "FROM";
        let mut j = i + 1;
        loop {
            while j < tokens.len() && SKIPPABLE.iter().any(|kw| tokens[j].is_keyword(kw)) {
                j += 1;
            }
            let Some(name) = tokens.get(j).and_then(table_name) else {
                break;
            };
            push(name);
            j += 1;
            if !list {
                break;
            }
            // optional alias, then a comma continues the FROM list
            if tokens.get(j).is_some_and(|t| t.is_keyword("AS")) {
                j += 1;
            }
            if tokens.get(j).is_some_and(|t| table_name(t).is_some()) {
                j += 1;
            }
            if tokens.get(j).is_some_and(|t| t.is_op(",")) {
                j += 1;
            } else {
                break;
            }
        }
        i = j.max(i + 1);
    }
    tables
}

/// Digest raw SQL into its template.
pub fn digest(sql_text: &str) -> Result<SqlTemplate> {
    if sql_text.trim().is_empty() {
        return Err(Error::EmptyInput);
    }
    let tokens = normalize(lex(sql_text)?);
    if tokens.is_empty() {
        return Err(Error::EmptyInput);
    }
    let statement_kind = tokens
        .iter()
        .find(|t| !t.is_op("("))
        .filter(|t| t.kind == Kind::Word)
        .map_or(StatementKind::Other, |t| {
            StatementKind::from_keyword(&t.text)
        });
    let tables = extract_tables(&tokens, statement_kind);
    let database = tables
        .iter()
        .find_map(|t| t.split_once('.').map(|(db, _)| db.to_string()));
    Ok(SqlTemplate {
        text: render(&tokens),
        statement_kind,
        tables,
        database,
    })
}

/// Token count as seen by the lexer (comments excluded).
pub fn token_count(sql_text: &str) -> Result<usize> {
    Ok(lex(sql_text)?.len())
}
