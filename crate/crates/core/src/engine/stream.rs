//! Splitting a labelled dataset into a sequence of class-disjoint tasks.

use rand::seq::SliceRandom;

use super::data::Dataset;
use crate::error::{Result, SparcError};
use crate::rng::substream;

/// One task of a stream. Samples keep their original dataset labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    /// Original class ids, sorted; position in this list is the local label.
    pub classes: Vec<u16>,
    /// Index of this task's first class in the concatenated output space.
    pub class_offset: usize,
    pub train: Dataset,
    pub test: Dataset,
}

impl Task {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Task-local head index of an original label.
    pub fn local_label(&self, label: u16) -> Option<usize> {
        self.classes.binary_search(&label).ok()
    }

    /// Local labels of the given samples of `data` (which must belong here).
    pub fn local_labels(&self, data: &Dataset, indices: &[usize]) -> Result<Vec<usize>> {
        indices
            .iter()
            .map(|&i| {
                let l = data.label(i);
                self.local_label(l)
                    .ok_or_else(|| SparcError::Validation(format!("label {l} does not belong to this task")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn total_classes(&self) -> usize {
        self.tasks.iter().map(Task::num_classes).sum()
    }

    /// Classes of tasks `0..=upto` in the concatenated output space.
    pub fn classes_upto(&self, upto: usize) -> usize {
        self.tasks[..=upto].iter().map(Task::num_classes).sum()
    }

    /// Concatenated-output index of an original label, if it is in the
    /// stream.
    pub fn stream_label(&self, label: u16) -> Option<usize> {
        self.tasks
            .iter()
            .find_map(|t| t.local_label(label).map(|l| t.class_offset + l))
    }
}

/// Shuffle the classes with `seed`, cut them into `num_tasks` equal
/// contiguous groups and route every train/test sample to its class's task.
pub fn split_dataset(train: &Dataset, test: &Dataset, num_tasks: usize, seed: u64) -> Result<TaskStream> {
    let k = train.num_classes;
    if num_tasks == 0 {
        return Err(SparcError::Validation("need at least one task".into()));
    }
    if test.num_classes != k || test.sample_len() != train.sample_len() {
        return Err(SparcError::Validation(
            "train and test sets disagree on classes or geometry".into(),
        ));
    }
    if !k.is_multiple_of(num_tasks) {
        return Err(SparcError::Validation(format!(
            "{k} classes cannot be split evenly into {num_tasks} tasks"
        )));
    }
    let mut order: Vec<u16> = (0..k as u16).collect();
    order.shuffle(&mut substream(seed, "split", 0));
    let per = k / num_tasks;
    let mut task_of = vec![0usize; k];
    let mut tasks = Vec::with_capacity(num_tasks);
    for (t, group) in order.chunks(per).enumerate() {
        let mut classes = group.to_vec();
        classes.sort_unstable();
        for c in &classes {
            task_of[usize::from(*c)] = t;
        }
        tasks.push(Task {
            classes,
            class_offset: t * per,
            train: train.empty_like(),
            test: test.empty_like(),
        });
    }
    for (src, pick) in [(train, 0), (test, 1)] {
        for i in 0..src.len() {
            let task = &mut tasks[task_of[usize::from(src.label(i))]];
            let dst = if pick == 0 { &mut task.train } else { &mut task.test };
            dst.push(src.image(i), src.label(i))?;
        }
    }
    Ok(TaskStream { tasks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labelled(n_per: usize, k: usize) -> Dataset {
        let mut labels = Vec::new();
        let mut images = Vec::new();
        for c in 0..k {
            for i in 0..n_per {
                labels.push(c as u16);
                images.push((c * n_per + i) as f32 / (k * n_per) as f32);
            }
        }
        Dataset::new(1, 1, 1, k, images, labels).unwrap()
    }

    #[test]
    fn ten_classes_five_tasks_partition() {
        let d = labelled(3, 10);
        let s = split_dataset(&d, &d, 5, 1).unwrap();
        assert_eq!(s.len(), 5);
        let mut all: Vec<u16> = s.tasks.iter().flat_map(|t| t.classes.clone()).collect();
        assert!(s.tasks.iter().all(|t| t.num_classes() == 2));
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<u16>>());
        for (t, task) in s.tasks.iter().enumerate() {
            assert_eq!(task.class_offset, 2 * t);
            assert!(task.train.labels().iter().all(|l| task.classes.contains(l)));
        }
    }

    #[test]
    fn split_is_seed_determined() {
        let d = labelled(2, 10);
        let a = split_dataset(&d, &d, 5, 3).unwrap();
        assert_eq!(a, split_dataset(&d, &d, 5, 3).unwrap());
        let b = split_dataset(&d, &d, 5, 4).unwrap();
        let classes = |s: &TaskStream| s.tasks.iter().map(|t| t.classes.clone()).collect::<Vec<_>>();
        assert_ne!(classes(&a), classes(&b));
    }

    #[test]
    fn test_samples_form_the_same_multiset() {
        let d = labelled(4, 6);
        let s = split_dataset(&d, &d, 3, 9).unwrap();
        let key = |img: &[f32], l: u16| (img[0].to_bits(), l);
        let mut src: Vec<_> = (0..d.len()).map(|i| key(d.image(i), d.label(i))).collect();
        let mut got: Vec<_> = s
            .tasks
            .iter()
            .flat_map(|t| (0..t.test.len()).map(move |i| key(t.test.image(i), t.test.label(i))))
            .collect();
        src.sort_unstable();
        got.sort_unstable();
        assert_eq!(src, got);
    }

    #[test]
    fn uneven_split_is_rejected() {
        let d = labelled(1, 10);
        assert!(matches!(split_dataset(&d, &d, 3, 0), Err(SparcError::Validation(_))));
    }

    #[test]
    fn label_mappings() {
        let d = labelled(1, 4);
        let s = split_dataset(&d, &d, 2, 5).unwrap();
        for t in &s.tasks {
            for (local, c) in t.classes.iter().enumerate() {
                assert_eq!(t.local_label(*c), Some(local));
                assert_eq!(s.stream_label(*c), Some(t.class_offset + local));
            }
        }
    }
}
