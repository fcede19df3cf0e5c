//! CSV reports for evaluation, corpus statistics and model cost, each with a
//! reader that parses its own output back.

use std::io::{Read, Write};

use crate::data::stats::{connected_components, corpus_stats, ClassStats};
use crate::data::{ConfusionMatrix, MaskImage};
use crate::error::{Error, Result};
use crate::model::SegModel;

fn flush<W: Write>(mut w: csv::Writer<W>) -> Result<()> {
    w.flush().map_err(|e| Error::io("csv report", e))
}

fn f4(v: f64) -> String {
    format!("{v:.4}")
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Data(format!("`{s}` is not a number")))
}

/// Scores of one evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `(name, IoU)`; `None` for classes with zero union.
    pub classes: Vec<(String, Option<f64>)>,
    pub acc: f64,
    pub miou: f64,
}

impl EvalReport {
    pub fn from_confusion(cm: &ConfusionMatrix, names: &[String]) -> Result<Self> {
        if names.len() != cm.num_classes() {
            return Err(Error::Config(format!("{} class names for {} classes", names.len(), cm.num_classes())));
        }
        let classes = names.iter().cloned().zip(cm.iou_per_class()).collect();
        Ok(EvalReport { classes, acc: cm.pixel_accuracy()?, miou: cm.miou()? })
    }

    /// Rows `class,iou,included`, one per class, then `ACC` and `mIoU`
    /// footer rows. Excluded classes have an empty IoU.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["class", "iou", "included"])?;
        for (name, iou) in &self.classes {
            let (v, inc) = match iou {
                Some(v) => (f4(*v), "true"),
                None => (String::new(), "false"),
            };
            w.write_record([name.as_str(), &v, inc])?;
        }
        w.write_record(["ACC", &f4(self.acc), ""])?;
        w.write_record(["mIoU", &f4(self.miou), ""])?;
        flush(w)
    }

    /// Parses [`EvalReport::write_csv`] output (values at 4 decimals).
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let rows: Vec<csv::StringRecord> = r.records().collect::<std::result::Result<_, _>>()?;
        if rows.len() < 2 {
            return Err(Error::Data("eval report needs ACC and mIoU footer rows".into()));
        }
        let (body, footer) = rows.split_at(rows.len() - 2);
        if &footer[0][0] != "ACC" || &footer[1][0] != "mIoU" {
            return Err(Error::Data("eval report footer must be ACC then mIoU".into()));
        }
        let classes = body
            .iter()
            .map(|row| {
                let iou = if &row[2] == "true" { Some(parse_f64(&row[1])?) } else { None };
                Ok((row[0].to_string(), iou))
            })
            .collect::<Result<_>>()?;
        Ok(EvalReport { classes, acc: parse_f64(&footer[0][1])?, miou: parse_f64(&footer[1][1])? })
    }

    /// Aligned plain-text table.
    pub fn table(&self) -> String {
        let width = self.classes.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
        let mut s = format!("{:<width$}  IoU\n", "class");
        for (name, iou) in &self.classes {
            let v = iou.map_or_else(|| "-  (excluded: zero union)".to_string(), f4);
            s += &format!("{name:<width$}  {v}\n");
        }
        s += &format!("{:<width$}  {}\n{:<width$}  {}\n", "ACC", f4(self.acc), "mIoU", f4(self.miou));
        s
    }
}

/// Per-category corpus statistics plus a totals row.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsReport {
    pub rows: Vec<(String, ClassStats)>,
    /// Images with at least one foreground pixel.
    pub total_images: usize,
    /// Components of all categories over images with foreground.
    pub total_cmcc: f64,
    pub total_pixel_ratio: f64,
}

impl StatsReport {
    pub fn compute(masks: &[MaskImage], names: &[String]) -> Result<Self> {
        let n = names.len();
        let stats = corpus_stats(masks, n)?;
        let fg_images: Vec<&MaskImage> =
            masks.iter().filter(|m| m.labels().iter().any(|&v| v != 0 && v != crate::data::IGNORE)).collect();
        let components: usize =
            fg_images.iter().map(|m| (1..n).map(|c| connected_components(m, c as u8)).sum::<usize>()).sum();
        let total_pixel_ratio = stats.iter().map(|s| s.pixel_ratio).sum();
        Ok(StatsReport {
            rows: stats.into_iter().map(|s| (names[s.class as usize].clone(), s)).collect(),
            total_images: fg_images.len(),
            total_cmcc: components as f64 / fg_images.len() as f64,
            total_pixel_ratio,
        })
    }

    /// Rows `class,name,images,cmcc,pixel_ratio`; absent classes have an
    /// empty CMCC. The last row is `total`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["class", "name", "images", "cmcc", "pixel_ratio"])?;
        for (name, s) in &self.rows {
            let cmcc = s.cmcc.map(f4).unwrap_or_default();
            w.write_record([s.class.to_string(), name.clone(), s.images.to_string(), cmcc, f4(s.pixel_ratio)])?;
        }
        w.write_record([
            "total".to_string(),
            String::new(),
            self.total_images.to_string(),
            f4(self.total_cmcc),
            f4(self.total_pixel_ratio),
        ])?;
        flush(w)
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let rows: Vec<csv::StringRecord> = r.records().collect::<std::result::Result<_, _>>()?;
        let (total, body) = rows.split_last().ok_or_else(|| Error::Data("stats report is empty".into()))?;
        if &total[0] != "total" {
            return Err(Error::Data("stats report must end with a total row".into()));
        }
        let parse_usize = |s: &str| s.parse::<usize>().map_err(|_| Error::Data(format!("`{s}` is not a count")));
        let rows = body
            .iter()
            .map(|row| {
                let class = row[0].parse::<u8>().map_err(|_| Error::Data(format!("bad class id `{}`", &row[0])))?;
                let cmcc = if row[3].is_empty() { None } else { Some(parse_f64(&row[3])?) };
                let s = ClassStats { class, images: parse_usize(&row[2])?, cmcc, pixel_ratio: parse_f64(&row[4])? };
                Ok((row[1].to_string(), s))
            })
            .collect::<Result<_>>()?;
        Ok(StatsReport {
            rows,
            total_images: parse_usize(&total[2])?,
            total_cmcc: parse_f64(&total[3])?,
            total_pixel_ratio: parse_f64(&total[4])?,
        })
    }

    /// Same values rounded as written, for comparing against a parsed report.
    pub fn rounded(&self) -> Self {
        let r = |v: f64| parse_f64(&f4(v)).expect("formatted number parses");
        StatsReport {
            rows: self
                .rows
                .iter()
                .map(|(n, s)| {
                    (n.clone(), ClassStats { cmcc: s.cmcc.map(r), pixel_ratio: r(s.pixel_ratio), ..s.clone() })
                })
                .collect(),
            total_images: self.total_images,
            total_cmcc: r(self.total_cmcc),
            total_pixel_ratio: r(self.total_pixel_ratio),
        }
    }
}

/// Parameter and MAC counts per top-level module.
#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    /// `(module, params, macs)`.
    pub modules: Vec<(String, usize, u64)>,
}

impl CostReport {
    pub fn compute(model: &SegModel<f32>) -> Result<Self> {
        let params = model.param_counts();
        let macs = model.mac_counts()?;
        let mut names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
        for (scope, _) in &macs {
            if !names.contains(scope) {
                names.push(scope.clone());
            }
        }
        let modules = names
            .into_iter()
            .map(|name| {
                let p = params.iter().find(|(n, _)| *n == name).map_or(0, |(_, c)| *c);
                let m = macs.iter().find(|(n, _)| *n == name).map_or(0, |(_, c)| *c);
                (name, p, m)
            })
            .collect();
        Ok(CostReport { modules })
    }

    pub fn total_params(&self) -> usize {
        self.modules.iter().map(|m| m.1).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.modules.iter().map(|m| m.2).sum()
    }

    /// Rows `module,params,macs` followed by a `total` row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["module", "params", "macs"])?;
        for (name, p, m) in &self.modules {
            w.write_record([name.clone(), p.to_string(), m.to_string()])?;
        }
        w.write_record(["total".to_string(), self.total_params().to_string(), self.total_macs().to_string()])?;
        flush(w)
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut rows: Vec<(String, usize, u64)> = r.deserialize().collect::<std::result::Result<_, _>>()?;
        match rows.pop() {
            Some((name, _, _)) if name == "total" => Ok(CostReport { modules: rows }),
            _ => Err(Error::Data("cost report must end with a total row".into())),
        }
    }
}
