use std::io::{Read, Write};

use byteorder::{LittleEndian, WriteBytesExt};

use crate::binio;
use crate::error::{Error, Result};

pub const OOD_DOMAIN: &str = "OOD";
pub const OOD_INTENT: &str = "OODIntent";
pub const OTHER_TAG: &str = "Other";

/// Label inventories for the three tasks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagSchema {
    domains: Vec<String>,
    intents: Vec<String>,
    tags: Vec<String>,
}

fn position(list: &[String], name: &str) -> Option<usize> {
    list.iter().position(|x| x == name)
}

fn check_unique(kind: &str, list: &[String]) -> Result<()> {
    for (i, a) in list.iter().enumerate() {
        if list[..i].contains(a) {
            return Err(Error::Label(format!("duplicate {kind} `{a}`")));
        }
        if a.is_empty() || a.chars().any(char::is_whitespace) {
            return Err(Error::Label(format!("{kind} `{a}` is empty or contains whitespace")));
        }
    }
    Ok(())
}

impl TagSchema {
    /// Requires `OOD` among the domains, `OODIntent` among the intents and
    /// `Other` among the tags.
    pub fn new(domains: Vec<String>, intents: Vec<String>, tags: Vec<String>) -> Result<Self> {
        check_unique("domain", &domains)?;
        check_unique("intent", &intents)?;
        check_unique("tag", &tags)?;
        for (list, name) in [(&domains, OOD_DOMAIN), (&intents, OOD_INTENT), (&tags, OTHER_TAG)] {
            if position(list, name).is_none() {
                return Err(Error::Label(format!("schema is missing `{name}`")));
            }
        }
        Ok(TagSchema {
            domains,
            intents,
            tags,
        })
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn intents(&self) -> &[String] {
        &self.intents
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn num_intents(&self) -> usize {
        self.intents.len()
    }

    pub fn num_tags(&self) -> usize {
        self.tags.len()
    }

    pub fn domain_id(&self, name: &str) -> Result<usize> {
        position(&self.domains, name).ok_or_else(|| Error::Label(format!("unknown domain `{name}`")))
    }

    pub fn intent_id(&self, name: &str) -> Result<usize> {
        position(&self.intents, name).ok_or_else(|| Error::Label(format!("unknown intent `{name}`")))
    }

    pub fn tag_id(&self, name: &str) -> Result<usize> {
        position(&self.tags, name).ok_or_else(|| Error::Label(format!("unknown tag `{name}`")))
    }

    pub fn ood_domain(&self) -> usize {
        position(&self.domains, OOD_DOMAIN).expect("validated")
    }

    pub fn ood_intent(&self) -> usize {
        position(&self.intents, OOD_INTENT).expect("validated")
    }

    pub fn other_tag(&self) -> usize {
        position(&self.tags, OTHER_TAG).expect("validated")
    }

    pub fn validate(&self, u: &Utterance) -> Result<()> {
        if u.tokens.is_empty() {
            return Err(Error::Label("empty utterance".into()));
        }
        if u.tokens.len() != u.slots.len() {
            return Err(Error::Label(format!(
                "{} tokens but {} slot tags",
                u.tokens.len(),
                u.slots.len()
            )));
        }
        if u.domain >= self.num_domains() {
            return Err(Error::Label(format!("domain id {} out of range", u.domain)));
        }
        if u.intent >= self.num_intents() {
            return Err(Error::Label(format!("intent id {} out of range", u.intent)));
        }
        if let Some(t) = u.slots.iter().find(|&&t| t >= self.num_tags()) {
            return Err(Error::Label(format!("tag id {t} out of range")));
        }
        Ok(())
    }

    pub(crate) fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for list in [&self.domains, &self.intents, &self.tags] {
            w.write_u32::<LittleEndian>(list.len() as u32)?;
            for s in list {
                binio::write_str(w, s)?;
            }
        }
        Ok(())
    }

    pub(crate) fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut lists = Vec::with_capacity(3);
        for _ in 0..3 {
            let n = binio::read_u32(r)? as usize;
            if n > 1 << 20 {
                return Err(Error::format("implausible label count"));
            }
            let list = (0..n).map(|_| binio::read_str(r)).collect::<Result<Vec<_>>>()?;
            lists.push(list);
        }
        let tags = lists.pop().unwrap();
        let intents = lists.pop().unwrap();
        let domains = lists.pop().unwrap();
        TagSchema::new(domains, intents, tags).map_err(|e| Error::format(format!("bad schema: {e}")))
    }
}

/// One labeled utterance in id space.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Utterance {
    pub tokens: Vec<usize>,
    pub domain: usize,
    pub intent: usize,
    pub slots: Vec<usize>,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn reserved_labels_are_required() {
        assert!(TagSchema::new(names(&["a"]), names(&["OODIntent"]), names(&["Other"])).is_err());
        assert!(TagSchema::new(names(&["OOD"]), names(&["x"]), names(&["Other"])).is_err());
        assert!(TagSchema::new(names(&["OOD"]), names(&["OODIntent"]), names(&["t"])).is_err());
        let s = TagSchema::new(names(&["a", "OOD"]), names(&["OODIntent", "i"]), names(&["t", "Other"])).unwrap();
        assert_eq!((s.ood_domain(), s.ood_intent(), s.other_tag()), (1, 0, 1));
    }

    #[test]
    fn validation() {
        let s = TagSchema::new(names(&["OOD"]), names(&["OODIntent"]), names(&["Other"])).unwrap();
        let good = Utterance { tokens: vec![3], domain: 0, intent: 0, slots: vec![0] };
        assert!(s.validate(&good).is_ok());
        let bad = Utterance { slots: vec![1], ..good.clone() };
        assert!(matches!(s.validate(&bad), Err(Error::Label(_))));
        let ragged = Utterance { slots: vec![0, 0], ..good };
        assert!(s.validate(&ragged).is_err());
    }

    #[test]
    fn binary_round_trip() {
        let s = TagSchema::new(names(&["x", "OOD"]), names(&["OODIntent", "y"]), names(&["Other", "t"])).unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(TagSchema::read_from(&mut buf.as_slice()).unwrap(), s);
    }
}
