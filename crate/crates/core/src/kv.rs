//! `key = value` text configs with `#` comments. Every key must be consumed;
//! leftovers are reported as unknown.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim().to_string();
            if entries.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    /// Removes and parses `key`, leaving `target` untouched when absent.
    pub fn take<T: FromStr>(&mut self, key: &str, target: &mut T) -> Result<()> {
        if let Some(v) = self.entries.remove(key) {
            *target = v
                .parse()
                .map_err(|_| Error::Config(format!("bad value for {key}: {v:?}")))?;
        }
        Ok(())
    }

    pub fn take_raw(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            Some(k) => Err(Error::Config(format!("unknown key {k:?}"))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects_unknown() {
        let mut kv = KvConfig::parse("# header\nepochs = 3  # trailing\n\nlr=0.5\n").unwrap();
        let (mut epochs, mut lr, mut other) = (0usize, 0.0f64, 7u32);
        kv.take("epochs", &mut epochs).unwrap();
        kv.take("lr", &mut lr).unwrap();
        kv.take("missing", &mut other).unwrap();
        assert_eq!((epochs, lr, other), (3, 0.5, 7));
        kv.finish().unwrap();

        let mut kv = KvConfig::parse("a = 1\nb = 2").unwrap();
        let mut a = 0u8;
        kv.take("a", &mut a).unwrap();
        assert!(matches!(kv.finish(), Err(Error::Config(_))));
        assert!(KvConfig::parse("a = 1\na = 2").is_err());
        assert!(KvConfig::parse("novalue").is_err());
        let mut kv = KvConfig::parse("a = x").unwrap();
        assert!(kv.take("a", &mut a).is_err());
    }
}
