pub mod metric_oracle;
pub mod scenes;
pub mod splat_oracle;
