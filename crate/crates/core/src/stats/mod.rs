//! Carrier generation and the null distribution of carrier/weight cosines.

mod carriers;
mod pvalue;
pub mod special;

pub use carriers::{generate_carriers, mc_null_samples, CarrierSet};
pub use pvalue::{
    combine_ln_pvalues, combine_pvalues, cosine_hypothesis_test, cosine_ln_pvalue,
    cosine_log10_pvalue, cosine_pvalue, HypothesisTestResult,
};
