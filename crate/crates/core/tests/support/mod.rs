pub mod fusion_oracle;
