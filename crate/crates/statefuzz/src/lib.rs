//! Host side of statefuzz: file formats, the TCP transport and campaign
//! orchestration on top of [`statefuzz_core`].

pub mod campaign;
pub mod corpus;
pub mod markov_file;
pub mod replay;
pub mod socket;

pub use campaign::{bootstrap_end_states, run_campaign, Budget, CampaignConfig, CampaignSummary};
pub use statefuzz_core as core;
