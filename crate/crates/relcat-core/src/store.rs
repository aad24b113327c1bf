//! The four-table relational dataset (transactions, categories, codes,
//! companies): loading, validation, and typed access.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttrKind {
    Text,
    Decimal,
    Date,
}

#[derive(Clone, Debug)]
pub struct TableSchema {
    pub name: String,
    pub primary_key: String,
    /// (fk column, target table)
    pub foreign_keys: Vec<(String, String)>,
    pub attribute_columns: Vec<(String, AttrKind)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub pk: String,
    /// column -> referenced pk (None encodes a null foreign key)
    pub fkeys: BTreeMap<String, Option<String>>,
    pub attributes: BTreeMap<String, String>,
}

#[derive(Clone, Debug)]
pub struct Table {
    pub schema: TableSchema,
    pub rows: Vec<Row>,
    index: HashMap<String, usize>,
}

impl Table {
    pub fn row_by_pk(&self, pk: &str) -> Option<&Row> {
        self.index.get(pk).map(|&i| &self.rows[i])
    }

    pub fn index_of_pk(&self, pk: &str) -> Option<usize> {
        self.index.get(pk).copied()
    }
}

/// A primary-foreign key link: `from_table.fk_column` references `to_table`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Link {
    pub from_table: String,
    pub fk_column: String,
    pub to_table: String,
}

#[derive(Clone, Debug)]
pub struct RelationalDatabase {
    pub tables: BTreeMap<String, Table>,
    pub links: Vec<Link>,
}

/// Typed view of one transaction row.
#[derive(Clone, Debug, PartialEq)]
pub struct TransactionRecord {
    pub pk: String,
    pub company_fk: String,
    pub category_fk: Option<String>,
    pub description: String,
    /// Exact decimal string as loaded; parsed to binary float only when a
    /// sentence is rendered, so formatting stays deterministic.
    pub amount: String,
    pub memo: Option<String>,
    pub date: String,
}

impl TransactionRecord {
    pub fn amount_value(&self) -> f64 {
        self.amount.parse::<f64>().unwrap_or(f64::NAN)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    DuplicatePk {
        table: String,
        pk: String,
    },
    DanglingForeignKey {
        table: String,
        pk: String,
        column: String,
        value: String,
    },
    EmptyDescription {
        pk: String,
    },
    BadAmount {
        pk: String,
        value: String,
    },
}

#[derive(Clone, Debug, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

pub const TABLE_TRANSACTION: &str = "transaction";
pub const TABLE_CATEGORY: &str = "category";
pub const TABLE_CODE: &str = "code";
pub const TABLE_COMPANY: &str = "company";

pub fn canonical_schemas() -> Vec<TableSchema> {
    vec![
        TableSchema {
            name: TABLE_TRANSACTION.into(),
            primary_key: "pk".into(),
            foreign_keys: vec![
                ("company_fk".into(), TABLE_COMPANY.into()),
                ("category_fk".into(), TABLE_CATEGORY.into()),
            ],
            attribute_columns: vec![
                ("description".into(), AttrKind::Text),
                ("amount".into(), AttrKind::Decimal),
                ("memo".into(), AttrKind::Text),
                ("date".into(), AttrKind::Date),
            ],
        },
        TableSchema {
            name: TABLE_CATEGORY.into(),
            primary_key: "pk".into(),
            foreign_keys: vec![
                ("company_fk".into(), TABLE_COMPANY.into()),
                ("code_fk".into(), TABLE_CODE.into()),
            ],
            attribute_columns: vec![("name".into(), AttrKind::Text)],
        },
        TableSchema {
            name: TABLE_CODE.into(),
            primary_key: "pk".into(),
            foreign_keys: vec![],
            attribute_columns: vec![("name".into(), AttrKind::Text)],
        },
        TableSchema {
            name: TABLE_COMPANY.into(),
            primary_key: "pk".into(),
            foreign_keys: vec![],
            attribute_columns: vec![("name".into(), AttrKind::Text)],
        },
    ]
}

fn file_name_for(table: &str) -> &'static str {
    match table {
        TABLE_TRANSACTION => "transactions.csv",
        TABLE_CATEGORY => "categories.csv",
        TABLE_CODE => "codes.csv",
        TABLE_COMPANY => "companies.csv",
        _ => unreachable!("fixed four-table layout"),
    }
}

/// Column order in the delimited files, pk first, then fks, then attributes.
fn columns_for(schema: &TableSchema) -> Vec<String> {
    let mut cols = vec![schema.primary_key.clone()];
    cols.extend(schema.foreign_keys.iter().map(|(c, _)| c.clone()));
    cols.extend(schema.attribute_columns.iter().map(|(c, _)| c.clone()));
    cols
}

/// Load and fully validate the dataset directory.
pub fn load_database(dir: impl AsRef<Path>) -> Result<RelationalDatabase> {
    let dir = dir.as_ref();
    let mut tables = BTreeMap::new();
    let mut links = Vec::new();

    for schema in canonical_schemas() {
        let path = dir.join(file_name_for(&schema.name));
        if !path.exists() {
            return Err(Error::MissingTable {
                table: schema.name.clone(),
                path: path.display().to_string(),
            });
        }
        let file = File::open(&path)?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(BufReader::new(file));
        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| Error::Csv {
                table: schema.name.clone(),
                source: e,
            })?
            .iter()
            .map(str::to_string)
            .collect();
        let expected = columns_for(&schema);
        for col in &expected {
            if !headers.iter().any(|h| h == col) {
                return Err(Error::MissingColumn {
                    table: schema.name.clone(),
                    column: col.clone(),
                });
            }
        }
        let col_pos: HashMap<&str, usize> = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.as_str(), i))
            .collect();

        let mut rows = Vec::new();
        let mut index = HashMap::new();
        for record in reader.records() {
            let record = record.map_err(|e| Error::Csv {
                table: schema.name.clone(),
                source: e,
            })?;
            let field = |col: &str| record.get(col_pos[col]).unwrap_or("").to_string();
            let pk = field(&schema.primary_key);
            let mut fkeys = BTreeMap::new();
            for (col, _) in &schema.foreign_keys {
                let v = field(col);
                fkeys.insert(col.clone(), if v.is_empty() { None } else { Some(v) });
            }
            let mut attributes = BTreeMap::new();
            for (col, _) in &schema.attribute_columns {
                attributes.insert(col.clone(), field(col));
            }
            if index.insert(pk.clone(), rows.len()).is_some() {
                return Err(Error::DuplicatePk {
                    table: schema.name.clone(),
                    pk,
                });
            }
            rows.push(Row {
                pk,
                fkeys,
                attributes,
            });
        }
        for (col, target) in &schema.foreign_keys {
            links.push(Link {
                from_table: schema.name.clone(),
                fk_column: col.clone(),
                to_table: target.clone(),
            });
        }
        tables.insert(
            schema.name.clone(),
            Table {
                schema,
                rows,
                index,
            },
        );
    }

    let db = RelationalDatabase { tables, links };
    // Referential integrity is a load-time error, not merely a report entry.
    for (tname, table) in &db.tables {
        for row in &table.rows {
            for (col, target) in &table.schema.foreign_keys {
                if let Some(Some(value)) = row.fkeys.get(col).map(|v| v.as_ref()) {
                    if db.tables[target].row_by_pk(value).is_none() {
                        return Err(Error::DanglingForeignKey {
                            table: tname.clone(),
                            pk: row.pk.clone(),
                            column: col.clone(),
                            target: target.clone(),
                            value: value.clone(),
                        });
                    }
                }
            }
        }
    }
    Ok(db)
}

/// Write the dataset in the delimited format. `load_database(save(db)) == db`
/// and re-saving a loaded directory reproduces the bytes.
pub fn save_database(db: &RelationalDatabase, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (name, table) in &db.tables {
        let path = dir.join(file_name_for(name));
        let file = File::create(&path)?;
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(BufWriter::new(file));
        let cols = columns_for(&table.schema);
        w.write_record(&cols).map_err(|e| Error::Csv {
            table: name.clone(),
            source: e,
        })?;
        for row in &table.rows {
            let mut rec = Vec::with_capacity(cols.len());
            rec.push(row.pk.clone());
            for (col, _) in &table.schema.foreign_keys {
                rec.push(row.fkeys[col].clone().unwrap_or_default());
            }
            for (col, _) in &table.schema.attribute_columns {
                rec.push(row.attributes[col].clone());
            }
            w.write_record(&rec).map_err(|e| Error::Csv {
                table: name.clone(),
                source: e,
            })?;
        }
        w.into_inner()
            .map_err(|e| Error::Other(format!("flush {name}: {e}")))?
            .flush()?;
    }
    Ok(())
}

/// Report-valued integrity check: duplicate pks, dangling fks, and
/// transaction-record invariants. Null category links are legal.
pub fn validate(db: &RelationalDatabase) -> ValidationReport {
    let mut report = ValidationReport::default();
    for (tname, table) in &db.tables {
        let mut seen = HashSet::new();
        for row in &table.rows {
            if !seen.insert(row.pk.as_str()) {
                report.violations.push(Violation::DuplicatePk {
                    table: tname.clone(),
                    pk: row.pk.clone(),
                });
            }
            for (col, target) in &table.schema.foreign_keys {
                if let Some(Some(value)) = row.fkeys.get(col).map(|v| v.as_ref()) {
                    if db.tables[target].row_by_pk(value).is_none() {
                        report.violations.push(Violation::DanglingForeignKey {
                            table: tname.clone(),
                            pk: row.pk.clone(),
                            column: col.clone(),
                            value: value.clone(),
                        });
                    }
                }
            }
        }
    }
    for txn in transactions(db) {
        if txn.description.is_empty() {
            report
                .violations
                .push(Violation::EmptyDescription { pk: txn.pk.clone() });
        }
        if txn.amount_value().is_nan() {
            report.violations.push(Violation::BadAmount {
                pk: txn.pk.clone(),
                value: txn.amount.clone(),
            });
        }
    }
    report
}

/// Typed iteration over the transaction table, in row order.
pub fn transactions(db: &RelationalDatabase) -> Vec<TransactionRecord> {
    let table = &db.tables[TABLE_TRANSACTION];
    table
        .rows
        .iter()
        .map(|row| {
            let memo = row.attributes["memo"].clone();
            TransactionRecord {
                pk: row.pk.clone(),
                company_fk: row.fkeys["company_fk"].clone().unwrap_or_default(),
                category_fk: row.fkeys["category_fk"].clone(),
                description: row.attributes["description"].clone(),
                amount: row.attributes["amount"].clone(),
                memo: if memo.is_empty() { None } else { Some(memo) },
                date: row.attributes["date"].clone(),
            }
        })
        .collect()
}

/// Total count of non-null foreign keys across all tables. This is the
/// brute-force enumerator the graph conversion is checked against.
pub fn count_non_null_fkeys(db: &RelationalDatabase) -> usize {
    db.tables
        .values()
        .flat_map(|t| t.rows.iter())
        .map(|r| r.fkeys.values().filter(|v| v.is_some()).count())
        .sum()
}

/// In-memory construction of a [`RelationalDatabase`] with the canonical
/// schema. Used by the synthetic generator and by tests.
pub struct DbBuilder {
    db: RelationalDatabase,
}

impl Default for DbBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl DbBuilder {
    pub fn new() -> Self {
            let mut tables = BTreeMap::new();
        let mut links = Vec::new();
        for schema in canonical_schemas() {
            for (col, target) in &schema.foreign_keys {
                links.push(Link {
                    from_table: schema.name.clone(),
                    fk_column: col.clone(),
                    to_table: target.clone(),
                });
            }
            tables.insert(
                schema.name.clone(),
                Table {
                    schema,
                    rows: Vec::new(),
                    index: HashMap::new(),
                },
            );
        }
        DbBuilder {
            db: RelationalDatabase { tables, links },
        }
    }

    fn push(&mut self, table: &str, row: Row) -> &mut Self {
        let t = self.db.tables.get_mut(table).unwrap();
        t.index.insert(row.pk.clone(), t.rows.len());
        t.rows.push(row);
        self
    }

    pub fn company(&mut self, pk: &str, name: &str) -> &mut Self {
        self.push(
            TABLE_COMPANY,
            Row {
                pk: pk.into(),
                fkeys: BTreeMap::new(),
                attributes: BTreeMap::from([("name".into(), name.into())]),
            },
        )
    }

    pub fn code(&mut self, pk: &str, name: &str) -> &mut Self {
        self.push(
            TABLE_CODE,
            Row {
                pk: pk.into(),
                fkeys: BTreeMap::new(),
                attributes: BTreeMap::from([("name".into(), name.into())]),
            },
        )
    }

    pub fn category(&mut self, pk: &str, company: &str, code: &str, name: &str) -> &mut Self {
        self.push(
            TABLE_CATEGORY,
            Row {
                pk: pk.into(),
                fkeys: BTreeMap::from([
                    ("company_fk".into(), Some(company.to_string())),
                    ("code_fk".into(), Some(code.to_string())),
                ]),
                attributes: BTreeMap::from([("name".into(), name.into())]),
            },
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn txn(
        &mut self,
        pk: &str,
        company: &str,
        category: Option<&str>,
        description: &str,
        amount: &str,
        memo: &str,
        date: &str,
    ) -> &mut Self {
        self.push(
            TABLE_TRANSACTION,
            Row {
                pk: pk.into(),
                fkeys: BTreeMap::from([
                    ("company_fk".into(), Some(company.to_string())),
                    ("category_fk".into(), category.map(str::to_string)),
                ]),
                attributes: BTreeMap::from([
                    ("description".into(), description.into()),
                    ("amount".into(), amount.into()),
                    ("memo".into(), memo.into()),
                    ("date".into(), date.into()),
                ]),
            },
        )
    }

    pub fn build(&self) -> RelationalDatabase {
        self.db.clone()
    }
}

/// One company, one code, one category, one categorized transaction.
pub fn tiny_db() -> RelationalDatabase {
    let mut b = DbBuilder::new();
    b.company("co1", "ACME LLC")
        .code("cd1", "Business Expenses")
        .category("cat1", "co1", "cd1", "Fuel")
        .txn("t1", "co1", Some("cat1"), "EXXONMOBIL 42", "-45.50", "", "2023-01-02");
    b.build()
}
