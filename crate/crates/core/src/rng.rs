//! Counter-based random streams.
//!
//! Every random number used by a simulation is a pure function of
//! `(master seed, replica, channel, index, counter)`. Nothing is carried
//! between replicas, so an ensemble produces the same numbers no matter
//! how replicas are scheduled across threads.

use rand::RngCore;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn combine(key: u64, word: u64) -> u64 {
    mix64(key ^ mix64(word.wrapping_add(GOLDEN_GAMMA)))
}

/// Independent purposes a replica draws randomness for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Init,
    Step,
    Refine,
    Sampler,
}

impl Channel {
    fn tag(self) -> u64 {
        match self {
            Channel::Init => 0x494E_4954,
            Channel::Step => 0x5354_4550,
            Channel::Refine => 0x5245_4649,
            Channel::Sampler => 0x5341_4D50,
        }
    }
}

/// Random source of one replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplicaRng {
    master_seed: u64,
    replica: u64,
    key: u64,
}

impl ReplicaRng {
    pub fn new(master_seed: u64, replica: u64) -> Self {
        let key = combine(mix64(master_seed ^ 0x4154_4C41_535F_4C41), replica);
        Self {
            master_seed,
            replica,
            key,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn replica(&self) -> u64 {
        self.replica
    }

    /// Keys for the `index`-th use of `channel`, e.g. one simulation step.
    pub fn keys(&self, channel: Channel, index: u64) -> StreamKeys {
        StreamKeys {
            key: combine(combine(self.key, channel.tag()), index),
        }
    }

    /// A sequential stream for the `index`-th use of `channel`.
    pub fn stream(&self, channel: Channel, index: u64) -> CounterRng {
        self.keys(channel, index).substream(0)
    }
}

/// Keys shared by all substreams of one `(channel, index)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKeys {
    key: u64,
}

impl StreamKeys {
    /// Substream for one particle. Each substream owns 2^32 counters.
    #[inline]
    pub fn substream(&self, lane: u64) -> CounterRng {
        CounterRng {
            key: self.key,
            counter: lane << 32,
        }
    }
}

/// SplitMix-style generator whose `n`-th output is `mix(key + n * gamma)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn counter(&self) -> u64 {
        self.counter
    }
}

impl RngCore for CounterRng {
    #[inline]
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        let out = mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)));
        self.counter = self.counter.wrapping_add(1);
        out
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}
