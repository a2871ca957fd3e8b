pub mod layers;
pub mod oracle;
