//! Continuations as flat stacks of frames. A frame is a function id plus
//! its saved arguments; the arguments of every frame live in one shared
//! value buffer, so pushing a frame does not allocate once the buffers are
//! warm.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::cps::Fid;
use crate::lang::Value;

const NO_HOLE: u16 = u16::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Frame {
    fid: Fid,
    base: u32,
    len: u16,
    hole: u16,
}

/// A popped frame: the values are still in the buffer until the next push.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Top {
    pub fid: Fid,
    pub hole: Option<usize>,
    base: u32,
    len: u16,
}

static LINEARITY_VIOLATIONS: AtomicU64 = AtomicU64::new(0);

/// Threads that ended with frames pushed but never invoked, or invoked
/// more often than pushed.
pub fn linearity_violations() -> u64 {
    LINEARITY_VIOLATIONS.load(Ordering::Relaxed)
}

#[derive(Debug, Default)]
pub struct Continuation {
    frames: Vec<Frame>,
    vals: Vec<Value>,
    pushed: u64,
    popped: u64,
}

impl Continuation {
    pub fn new() -> Self {
        Continuation {
            frames: Vec::with_capacity(2),
            vals: Vec::with_capacity(4),
            pushed: 0,
            popped: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.frames.len()
    }

    /// Capacity of the value buffer, in values.
    pub fn capacity(&self) -> usize {
        self.vals.capacity()
    }

    pub fn counters(&self) -> (u64, u64) {
        (self.pushed, self.popped)
    }

    /// Heap bytes owned by this continuation.
    pub fn heap_bytes(&self) -> usize {
        self.frames.capacity() * std::mem::size_of::<Frame>() + self.vals.capacity() * std::mem::size_of::<Value>()
    }

    fn reserve(&mut self, n: usize) {
        let need = self.vals.len() + n;
        if need > self.vals.capacity() {
            // Grow by doubling at least; the buffer is never shrunk.
            let cap = self.vals.capacity();
            self.vals.reserve_exact(need.max(cap * 2) - self.vals.len());
        }
        if self.frames.len() == self.frames.capacity() {
            let cap = self.frames.capacity().max(1);
            self.frames.reserve_exact(cap);
        }
    }

    /// Push a frame. `hole` is the argument position filled by the value the
    /// continuation is invoked with.
    pub fn push(&mut self, fid: Fid, args: &[Value], hole: Option<usize>) {
        self.reserve(args.len());
        let base = self.vals.len() as u32;
        self.vals.extend_from_slice(args);
        self.frames.push(Frame {
            fid,
            base,
            len: args.len() as u16,
            hole: hole.map_or(NO_HOLE, |h| h as u16),
        });
        self.pushed += 1;
    }

    /// Pop the top frame. Its arguments must be collected with
    /// `take_args` before anything else is pushed.
    pub fn pop(&mut self) -> Option<Top> {
        let f = self.frames.pop()?;
        self.popped += 1;
        Some(Top {
            fid: f.fid,
            hole: (f.hole != NO_HOLE).then_some(f.hole as usize),
            base: f.base,
            len: f.len,
        })
    }

    /// Arguments of a popped frame, with the hole filled by `v`. Must be
    /// called before the next push.
    pub fn take_args(&mut self, top: &Top, v: Value, out: &mut Vec<Value>) {
        let start = top.base as usize;
        out.clear();
        out.extend_from_slice(&self.vals[start..start + top.len as usize]);
        if let Some(h) = top.hole {
            out[h] = v;
        }
        self.vals.truncate(start);
    }

    /// Record the end of the thread owning this continuation.
    pub fn finish(self) {
        if !self.frames.is_empty() || self.pushed != self.popped {
            LINEARITY_VIOLATIONS.fetch_add(1, Ordering::Relaxed);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Value::{Int, Unit};

    #[test]
    fn frames_come_back_in_reverse_order_with_holes_filled() {
        let mut k = Continuation::new();
        k.push(7, &[Unit, Int(2)], Some(0));
        k.push(3, &[Int(1)], None);
        let mut args = Vec::new();
        let top = k.pop().unwrap();
        k.take_args(&top, Int(99), &mut args);
        assert_eq!((top.fid, args.clone()), (3, vec![Int(1)]));
        let top = k.pop().unwrap();
        k.take_args(&top, Int(5), &mut args);
        assert_eq!((top.fid, args), (7, vec![Int(5), Int(2)]));
        assert!(k.pop().is_none());
        assert_eq!(k.counters(), (2, 2));
    }

    #[test]
    fn capacity_grows_multiplicatively_and_never_shrinks() {
        let mut k = Continuation::new();
        let mut caps = vec![k.capacity()];
        for i in 0..1000 {
            k.push(0, &[Int(i), Int(i)], None);
            caps.push(k.capacity());
        }
        for _ in 0..1000 {
            let top = k.pop().unwrap();
            let mut a = Vec::new();
            k.take_args(&top, Unit, &mut a);
            caps.push(k.capacity());
        }
        assert!(caps.windows(2).all(|w| w[0] <= w[1]));
        let mut distinct = caps.clone();
        distinct.dedup();
        assert!(distinct.windows(2).all(|w| w[1] >= 2 * w[0]));
    }

    #[test]
    fn unbalanced_finish_is_counted() {
        let before = linearity_violations();
        let mut k = Continuation::new();
        k.push(0, &[], None);
        k.finish();
        assert!(linearity_violations() > before);
    }
}
