// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hook points of the forward pass.
//!
//! Two sites fire for every (token, layer), in this order:
//!
//! 1. [`ForwardHook::on_hidden`]: the residual-stream vector entering the
//!    MoE block of the layer. The toy model has no input normalization, so
//!    this is also the router input.
//! 2. [`ForwardHook::on_router_logits`]: the router logits immediately
//!    before the softmax.
//!
//! Hooks are applied in registration order.

use crate::model::Modality;
use crate::routing::Phase;

/// Where a hook is firing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HookSite {
    pub layer: usize,
    pub position: usize,
    pub token: usize,
    pub modality: Modality,
    pub phase: Phase,
}

pub trait ForwardHook {
    fn on_hidden(&mut self, _site: &HookSite, _hidden: &mut [f64]) {}

    fn on_router_logits(&mut self, _site: &HookSite, _logits: &mut [f64]) {}
}

/// Hooks to install for one forward pass, plus whether to capture hidden
/// snapshots.
#[derive(Default)]
pub struct HookBundle<'a> {
    hooks: Vec<&'a mut dyn ForwardHook>,
    capture_hidden: bool,
}

impl<'a> HookBundle<'a> {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn with(mut self, hook: &'a mut dyn ForwardHook) -> Self {
        self.hooks.push(hook);
        self
    }

    pub fn capture_hidden(mut self) -> Self {
        self.capture_hidden = true;
        self
    }

    pub fn captures_hidden(&self) -> bool {
        self.capture_hidden
    }

    pub(crate) fn fire_hidden(&mut self, site: &HookSite, hidden: &mut [f64]) {
        for hook in &mut self.hooks {
            hook.on_hidden(site, hidden);
        }
    }

    pub(crate) fn fire_router(&mut self, site: &HookSite, logits: &mut [f64]) {
        for hook in &mut self.hooks {
            hook.on_router_logits(site, logits);
        }
    }
}

/// Adds a constant to every router logit. With `0.0` it is the identity.
#[derive(Debug, Clone, Copy)]
pub struct LogitShift(pub f64);

impl ForwardHook for LogitShift {
    fn on_router_logits(&mut self, _site: &HookSite, logits: &mut [f64]) {
        for x in logits {
            *x += self.0;
        }
    }
}
