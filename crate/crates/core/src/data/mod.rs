//! Datasets: synthetic generation, NetPBM images and the on-disk layout
//! `meta.csv`, `schema.json`, `images/<id>.ppm`.

pub mod netpbm;
mod synthetic;

use std::collections::HashMap;
use std::path::Path;

pub use synthetic::{generate_synthetic, template, Complementarity, SyntheticSpec};

use crate::autodiff::Array;
use crate::encoders::{one_hot_encode, MetaRecord, MetaValue, MetadataSchema};
use crate::error::{Error, Result};

/// Aligned images, metadata and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    /// `n×C×H×W`.
    pub images: Array,
    pub records: Vec<MetaRecord>,
    /// `n×W` one-hot encoding of `records`.
    pub meta: Array,
    pub labels: Vec<usize>,
    pub schema: MetadataSchema,
}

impl Dataset {
    pub fn new(
        ids: Vec<String>,
        images: Array,
        records: Vec<MetaRecord>,
        labels: Vec<usize>,
        schema: MetadataSchema,
    ) -> Result<Self> {
        schema.validate()?;
        let n = ids.len();
        if images.shape().len() != 4 || images.shape()[0] != n || records.len() != n || labels.len() != n {
            return Err(Error::dim(
                "dataset",
                format!(
                    "{n} ids, images {:?}, {} records, {} labels",
                    images.shape(),
                    records.len(),
                    labels.len()
                ),
            ));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= schema.classes.len()) {
            return Err(Error::Data(format!("label {y} outside the {} classes", schema.classes.len())));
        }
        let width = schema.encoded_width();
        let mut meta = Vec::with_capacity(n * width);
        for r in &records {
            meta.extend(one_hot_encode(r, &schema)?);
        }
        let meta = Array::new(vec![n, width], meta)?;
        Ok(Self {
            ids,
            images,
            records,
            meta,
            labels,
            schema,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.schema.classes.len()
    }

    /// `(C, H, W)` of every image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn image_batch(&self, indices: &[usize]) -> Array {
        gather(&self.images, indices)
    }

    pub fn meta_batch(&self, indices: &[usize]) -> Array {
        gather(&self.meta, indices)
    }

    pub fn label_batch(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn class_counts(&self, indices: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.classes()];
        for &i in indices {
            counts[self.labels[i]] += 1;
        }
        counts
    }

    /// Writes the standard directory layout.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        self.schema.save(&dir.join("schema.json"))?;
        let path = dir.join("meta.csv");
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["id", "diagnostic"];
        header.extend(self.schema.columns.iter().map(|c| c.name.as_str()));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut row = vec![self.ids[i].clone(), self.schema.classes[self.labels[i]].clone()];
            row.extend(self.records[i].iter().map(|v| match v {
                MetaValue::Missing => String::new(),
                MetaValue::Text(s) => s.clone(),
                MetaValue::Number(x) => x.to_string(),
            }));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let (c, h, wd) = self.image_shape();
        let plane = c * h * wd;
        for (i, id) in self.ids.iter().enumerate() {
            let img = Array::new(vec![c, h, wd], self.images.data()[i * plane..(i + 1) * plane].to_vec())?;
            netpbm::write(&images.join(format!("{id}.ppm")), &img)?;
        }
        Ok(())
    }

    /// Reads the standard layout, resizing images to `height×width` with
    /// `channels` channels.
    pub fn load(dir: &Path, channels: usize, height: usize, width: usize) -> Result<Self> {
        let schema = MetadataSchema::load(&dir.join("schema.json"))?;
        let (ids, records, labels) = load_metadata_csv(&dir.join("meta.csv"), &schema)?;
        let mut pixels = Vec::with_capacity(ids.len() * channels * height * width);
        for id in &ids {
            let raw = netpbm::read(&dir.join("images").join(format!("{id}.ppm")))?;
            let img = netpbm::resize_bilinear(&netpbm::to_channels(raw, channels)?, height, width)?;
            pixels.extend_from_slice(img.data());
        }
        let images = Array::new(vec![ids.len(), channels, height, width], pixels)?;
        Self::new(ids, images, records, labels, schema)
    }
}

fn gather(source: &Array, indices: &[usize]) -> Array {
    let row = source.len() / source.shape()[0].max(1);
    let mut data = Vec::with_capacity(indices.len() * row);
    for &i in indices {
        data.extend_from_slice(&source.data()[i * row..(i + 1) * row]);
    }
    let mut shape = source.shape().to_vec();
    shape[0] = indices.len();
    Array::new(shape, data).expect("gathered rows match shape")
}

/// Parses a metadata CSV keyed by header names: an `id` column, a
/// `diagnostic` label column and every schema column, in any order.
pub fn load_metadata_csv(path: &Path, schema: &MetadataSchema) -> Result<(Vec<String>, Vec<MetaRecord>, Vec<usize>)> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers: HashMap<String, usize> = reader
        .headers()?
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().to_string(), i))
        .collect();
    let col = |name: &str| {
        headers
            .get(name)
            .copied()
            .ok_or_else(|| Error::Schema(format!("{}: missing column {name:?}", path.display())))
    };
    let id_col = col("id")?;
    let label_col = col("diagnostic")?;
    let cols: Vec<usize> = schema.columns.iter().map(|c| col(&c.name)).collect::<Result<_>>()?;
    let (mut ids, mut records, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        let cell = |i: usize| rec.get(i).unwrap_or("").trim();
        let label = cell(label_col);
        let y = schema.class_index(label).ok_or_else(|| {
            Error::Data(format!("{} line {line}: unknown diagnostic {label:?}", path.display()))
        })?;
        let record: MetaRecord = cols
            .iter()
            .enumerate()
            .map(|(k, &i)| schema.parse_cell(k, cell(i)))
            .collect::<Result<_>>()
            .map_err(|e| Error::Data(format!("{} line {line}: {e}", path.display())))?;
        one_hot_encode(&record, schema).map_err(|e| Error::Data(format!("{} line {line}: {e}", path.display())))?;
        ids.push(cell(id_col).to_string());
        records.push(record);
        labels.push(y);
    }
    Ok((ids, records, labels))
}
