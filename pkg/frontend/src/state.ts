/**
 * Pure view state for one similarity task.
 *
 * The decisions vector always has one 0/1 entry per displayed tile, in
 * display order; toggles are ignored while a submission is in flight so
 * the submitted vector matches what the annotator saw.
 */

import type { TaskPayload } from "./api.js";

export interface TaskView {
  task: TaskPayload;
  selected: boolean[];
  submitting: boolean;
}

export function newView(task: TaskPayload): TaskView {
  return {
    task,
    selected: task.shown.map(() => false),
    submitting: false,
  };
}

export function toggleTile(view: TaskView, slot: number): TaskView {
  if (view.submitting || slot < 0 || slot >= view.selected.length) {
    return view;
  }
  const selected = view.selected.slice();
  selected[slot] = !selected[slot];
  return { ...view, selected };
}

export function beginSubmit(view: TaskView): TaskView {
  return { ...view, submitting: true };
}

export function failSubmit(view: TaskView): TaskView {
  // selections are preserved so the annotator can retry
  return { ...view, submitting: false };
}

export function decisions(view: TaskView): number[] {
  return view.selected.map((s) => (s ? 1 : 0));
}
