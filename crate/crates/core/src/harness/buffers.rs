//! Coefficient replay and demonstration replay buffers.

use rand::seq::index::sample;
use rand::Rng;

use super::data::{TaskDemos, WindowRef};
use crate::router::CrEntry;
use crate::rng::StreamRng;

/// Archived router input/output pairs of finished tasks.
#[derive(Clone, Debug, Default)]
pub struct CrBuffer {
    pub ratio: f64,
    entries: Vec<CrEntry>,
}

impl CrBuffer {
    pub fn new(ratio: f64) -> Self {
        CrBuffer {
            ratio,
            entries: Vec::new(),
        }
    }

    /// `ceil(ρ · available)`, robust to `ρ · n` landing a hair above an integer.
    pub fn archive_count(&self, available: usize) -> usize {
        ((self.ratio * available as f64 - 1e-9).ceil().max(0.0) as usize).min(available)
    }

    pub fn push(&mut self, entries: impl IntoIterator<Item = CrEntry>) {
        self.entries.extend(entries);
    }

    pub fn entries(&self) -> &[CrEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count_for(&self, task: usize) -> usize {
        self.entries.iter().filter(|e| e.task == task).count()
    }

    pub fn bytes(&self) -> usize {
        self.entries.iter().map(|e| 4 * (e.context.len() + e.coeffs.len())).sum()
    }

    /// Up to `n` distinct entries drawn uniformly.
    pub fn sample(&self, n: usize, rng: &mut StreamRng) -> Vec<&CrEntry> {
        let n = n.min(self.entries.len());
        let mut idx = sample(rng, self.entries.len(), n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| &self.entries[i]).collect()
    }
}

/// `n` positions spread over trajectories of the given lengths in
/// proportion to their length (largest remainder), uniform within each.
pub fn stratified_sample(lengths: &[usize], n: usize, rng: &mut StreamRng) -> Vec<(usize, usize)> {
    let total: usize = lengths.iter().sum();
    if total == 0 || n == 0 {
        return Vec::new();
    }
    let n = n.min(total);
    let mut quota: Vec<usize> = lengths.iter().map(|&l| n * l / total).collect();
    let mut rem: Vec<(usize, usize)> = lengths.iter().enumerate().map(|(i, &l)| ((n * l) % total, i)).collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = n - quota.iter().sum::<usize>();
    for &(_, i) in rem.iter().take(short) {
        quota[i] += 1;
    }
    let mut out = Vec::with_capacity(n);
    for (traj, (&len, &q)) in lengths.iter().zip(&quota).enumerate() {
        let mut steps = sample(rng, len, q.min(len)).into_vec();
        steps.sort_unstable();
        out.extend(steps.into_iter().map(|s| (traj, s)));
    }
    out
}

/// Stored demonstrations of finished tasks for experience replay.
#[derive(Clone, Debug, Default)]
pub struct DemoReplayBuffer {
    pub fraction: f64,
    pub tasks: Vec<TaskDemos>,
    pub windows: Vec<Vec<WindowRef>>,
}

impl DemoReplayBuffer {
    pub fn new(fraction: f64) -> Self {
        DemoReplayBuffer {
            fraction,
            ..Default::default()
        }
    }

    /// Stores a task; its windows refer to set index `1 + position`.
    pub fn push(&mut self, demos: TaskDemos, context: usize) -> crate::Result<()> {
        let set = 1 + self.tasks.len();
        self.windows.push(super::data::windows(set, &demos, context)?);
        self.tasks.push(demos);
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn bytes(&self) -> usize {
        self.tasks.iter().map(|t| t.bytes()).sum()
    }

    /// Replay slots in a batch of `batch`: `round(fraction · batch)`, none
    /// while the buffer is empty.
    pub fn replay_slots(&self, batch: usize) -> usize {
        if self.is_empty() {
            0
        } else {
            (self.fraction * batch as f64).round() as usize
        }
    }
}

/// New-task windows followed by replayed windows, each replay slot from a
/// uniformly chosen stored task.
pub fn er_sample_batch(buffer: &DemoReplayBuffer, new_task: &[WindowRef], batch: usize, rng: &mut StreamRng) -> Vec<WindowRef> {
    let slots = buffer.replay_slots(batch);
    let mut out: Vec<WindowRef> = new_task.iter().take(batch - slots).copied().collect();
    for _ in 0..slots {
        let t = rng.random_range(0..buffer.tasks.len());
        let w = &buffer.windows[t];
        out.push(w[rng.random_range(0..w.len())]);
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::world::{collect_demonstrations, generate_suite, Family};

    #[test]
    fn archive_counts_round_up() {
        let b = CrBuffer::new(0.05);
        assert_eq!(b.archive_count(1200), 60);
        assert_eq!(b.archive_count(1201), 61);
        assert_eq!(b.archive_count(1), 1);
        assert_eq!(CrBuffer::new(1.0).archive_count(37), 37);
    }

    #[test]
    fn stratified_sample_respects_quotas() {
        let mut rng = StreamRng::seed_from_u64(0);
        let lens = [40, 60, 100];
        let s = stratified_sample(&lens, 20, &mut rng);
        assert_eq!(s.len(), 20);
        let per: Vec<usize> = (0..3).map(|t| s.iter().filter(|p| p.0 == t).count()).collect();
        assert_eq!(per, vec![4, 6, 10]);
        assert!(s.iter().all(|&(t, i)| i < lens[t]));
        let mut dedup = s.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), s.len());
        assert_eq!(stratified_sample(&lens, 500, &mut rng).len(), 200);
    }

    #[test]
    fn storage_bytes_follow_entry_widths() {
        let mut b = CrBuffer::new(1.0);
        assert_eq!(b.bytes(), 0);
        b.push([CrEntry {
            task: 1,
            context: vec![0.0; 56],
            coeffs: vec![0.0; 30],
        }]);
        assert_eq!(b.bytes(), 344);
    }

    fn replay_buffer(tasks: usize) -> (DemoReplayBuffer, Vec<WindowRef>) {
        let suite = generate_suite(3, Family::Goal, tasks + 1).unwrap();
        let mut buf = DemoReplayBuffer::new(0.2);
        let mut fresh = Vec::new();
        for (i, task) in suite.into_iter().enumerate() {
            let demos = TaskDemos::new(task.clone(), collect_demonstrations(&task, 2, i as u64, 4).unwrap()).unwrap();
            if i == tasks {
                fresh = super::super::data::windows(0, &demos, 6).unwrap();
            } else {
                buf.push(demos, 6).unwrap();
            }
        }
        (buf, fresh)
    }

    #[test]
    fn first_task_batches_have_no_replay() {
        let (buf, fresh) = replay_buffer(0);
        let mut rng = StreamRng::seed_from_u64(1);
        let b = er_sample_batch(&buf, &fresh, 32, &mut rng);
        assert_eq!(b.len(), 32);
        assert!(b.iter().all(|w| w.set == 0));
    }

    #[test]
    fn replay_is_uniform_over_stored_tasks() {
        let (buf, fresh) = replay_buffer(2);
        assert_eq!(buf.replay_slots(32), 6);
        let mut rng = StreamRng::seed_from_u64(2);
        let mut counts = [0usize; 2];
        for _ in 0..500 {
            let b = er_sample_batch(&buf, &fresh, 32, &mut rng);
            assert_eq!(b.iter().filter(|w| w.set == 0).count(), 26);
            for w in b.iter().filter(|w| w.set > 0) {
                counts[w.set - 1] += 1;
            }
        }
        // chi-square against the uniform split, 1 dof, p = 0.01 critical value 6.635
        let n = (counts[0] + counts[1]) as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - n / 2.0).powi(2) / (n / 2.0)).sum();
        assert!(chi2 < 6.635, "chi-square {chi2} for {counts:?}");
    }
}
