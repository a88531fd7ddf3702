//! Interrupt identification and firing.
//!
//! Firmware reveals which interrupts it can service by writing the
//! controller's set-enable / clear-enable registers; we track that mask and
//! fire enabled IRQs either round-robin at a fixed basic-block interval or
//! from an explicit script. Block counts, not wall time, are the timebase,
//! so firing sequences replay exactly.

use std::collections::BTreeMap;

/// Set-enable register: write 1-bits to enable.
pub const NVIC_ISER: u32 = 0xe000_e100;
/// Clear-enable register: write 1-bits to disable.
pub const NVIC_ICER: u32 = 0xe000_e180;

pub const DEFAULT_IRQ_INTERVAL: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FiringStrategy {
    /// Fire the next enabled IRQ once `interval` blocks have elapsed since
    /// the previous firing. Waits for ISR exit rather than preempting.
    RoundRobin,
    /// Fire exactly the listed `(bb_count, irq)` pairs (must be sorted by
    /// block count). Fires even inside ISRs, enabling deliberate nesting.
    Scripted(Vec<(u64, u8)>),
    None,
}

/// One observed enable/disable write, for the model's interrupt log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IrqEvent {
    pub bb: u64,
    pub enable: bool,
    pub mask: u32,
}

#[derive(Debug, Clone)]
pub struct IrqState {
    /// Currently enabled IRQs, bit n = IRQ n.
    pub enabled: u32,
    /// Next rotation index to consider (advances past each fired IRQ).
    rr_cursor: u8,
    /// Blocks between round-robin firings.
    pub interval: u64,
    last_fire_bb: u64,
    /// Position in a scripted strategy.
    script_pos: usize,
    /// Non-NVIC system-control words are plain storage.
    scs_store: BTreeMap<u32, u32>,
    /// Enable/disable writes in observation order.
    pub event_log: Vec<IrqEvent>,
    /// Every firing as `(bb_count, irq)`.
    pub firing_log: Vec<(u64, u8)>,
}

impl IrqState {
    pub fn new(interval: u64) -> IrqState {
        IrqState {
            enabled: 0,
            rr_cursor: 0,
            interval,
            last_fire_bb: 0,
            script_pos: 0,
            scs_store: BTreeMap::new(),
            event_log: Vec::new(),
            firing_log: Vec::new(),
        }
    }

    pub fn scs_write(&mut self, addr: u32, value: u32, bb: u64) {
        match addr {
            NVIC_ISER => {
                self.enabled |= value;
                if value != 0 {
                    self.event_log.push(IrqEvent { bb, enable: true, mask: value });
                }
            }
            NVIC_ICER => {
                self.enabled &= !value;
                if value != 0 {
                    self.event_log.push(IrqEvent { bb, enable: false, mask: value });
                }
            }
            _ => {
                self.scs_store.insert(addr, value);
            }
        }
    }

    pub fn scs_read(&self, addr: u32) -> u32 {
        match addr {
            // Both enable registers read back the current enable mask.
            NVIC_ISER | NVIC_ICER => self.enabled,
            _ => self.scs_store.get(&addr).copied().unwrap_or(0),
        }
    }

    /// Called at every basic-block boundary; returns an IRQ to enter.
    pub fn tick(
        &mut self,
        strategy: &FiringStrategy,
        bb_count: u64,
        in_isr: u32,
    ) -> Option<u8> {
        match strategy {
            FiringStrategy::None => None,
            FiringStrategy::RoundRobin => {
                if in_isr > 0
                    || self.enabled == 0
                    || bb_count - self.last_fire_bb < self.interval
                {
                    return None;
                }
                // Next enabled IRQ at/after the cursor, wrapping.
                for i in 0..32u8 {
                    let irq = (self.rr_cursor as u32 + i as u32) % 32;
                    if self.enabled & (1 << irq) != 0 {
                        self.rr_cursor = (irq as u8 + 1) % 32;
                        self.last_fire_bb = bb_count;
                        self.firing_log.push((bb_count, irq as u8));
                        return Some(irq as u8);
                    }
                }
                None
            }
            FiringStrategy::Scripted(script) => {
                while self.script_pos < script.len() {
                    let (bb, irq) = script[self.script_pos];
                    if bb_count < bb {
                        return None;
                    }
                    self.script_pos += 1;
                    // Never fire a disabled IRQ; drop the entry instead.
                    if self.enabled & (1u32 << irq) != 0 {
                        self.firing_log.push((bb_count, irq));
                        return Some(irq);
                    }
                }
                None
            }
        }
    }
}

/// Replay an enable/disable event log against a firing log and verify that
/// every firing hit a line that was enabled at its boundary. Returns the
/// first offending `(bb, irq)` pair. Events land strictly after the
/// boundary that fired them (handler entry crosses a block first), so a
/// same-`bb` event is applied before the firing is judged only when the
/// firmware enabled the line in the block leading up to the boundary.
pub fn audit_firings(events: &[IrqEvent], firings: &[(u64, u8)]) -> Result<(), (u64, u8)> {
    let mut mask = 0u32;
    let mut next = 0usize;
    for &(bb, irq) in firings {
        while next < events.len() && events[next].bb <= bb {
            let ev = &events[next];
            if ev.enable {
                mask |= ev.mask;
            } else {
                mask &= !ev.mask;
            }
            next += 1;
        }
        if mask & (1u32 << irq) == 0 {
            return Err((bb, irq));
        }
    }
    Ok(())
}
