use std::fs::File;
use std::io::{self, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde_json::{Map, Value};

use crate::Failure;

/// Line-delimited JSON records on stdout, optionally mirrored to a file.
#[derive(Clone)]
pub struct Emitter {
    file: Option<Arc<Mutex<File>>>,
    start: Instant,
}

impl Emitter {
    pub fn new(path: Option<&Path>) -> Result<Emitter, Failure> {
        let file = match path {
            Some(p) => Some(Arc::new(Mutex::new(File::create(p).map_err(|e| {
                Failure::Env(format!("cannot create {}: {e}", p.display()))
            })?))),
            None => None,
        };
        Ok(Emitter {
            file,
            start: Instant::now(),
        })
    }

    pub fn elapsed_ms(&self) -> f64 {
        self.start.elapsed().as_secs_f64() * 1e3
    }

    /// Writes `{"event": kind, "t_ms": .., ...fields}`.
    pub fn emit(&self, kind: &str, fields: Value) {
        let mut rec = Map::new();
        rec.insert("event".into(), kind.into());
        rec.insert("t_ms".into(), self.elapsed_ms().into());
        if let Value::Object(m) = fields {
            rec.extend(m);
        }
        self.raw(&Value::Object(rec));
    }

    /// Writes a record as is.
    pub fn raw(&self, rec: &Value) {
        let line = rec.to_string();
        {
            let mut out = io::stdout().lock();
            let _ = writeln!(out, "{line}");
            let _ = out.flush();
        }
        if let Some(f) = &self.file {
            let mut f = f.lock().unwrap_or_else(|p| p.into_inner());
            let _ = writeln!(f, "{line}");
        }
    }
}
