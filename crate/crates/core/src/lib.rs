//! Dual-pixel defocus deblurring driven by vision-language blur priors.
//!
//! The crate is organized along the processing chain:
//!
//! * [`dp_formation`] renders synthetic dual-pixel pairs with ground truth,
//! * [`vl_encoder`] supplies dense image and prompt embeddings,
//! * [`blurmap`] turns those embeddings into zero-shot blur maps,
//! * [`deblur_net`] restores the all-in-focus image with blur-prior attention,
//! * [`losses`] and [`train_eval`] train and evaluate the network,
//! * [`io`] reads and writes images, float maps, checkpoints and datasets.

pub mod blurmap;
pub mod deblur_net;
pub mod dp_formation;
pub mod error;
pub mod image;
pub mod io;
pub mod losses;
pub mod train_eval;
pub mod vl_encoder;

pub use error::{LdpError, Result};
pub use image::Image;
