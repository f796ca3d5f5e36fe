/** JSON schemas shared with the decision engine (its external interfaces). */

export interface ManifestEvent {
  onset_s: number
  duration_s: number
  class_name: string
}

export type ClassRole = { role: 'id'; index: number } | { role: 'ood' } | { role: 'rest' }

export interface SessionManifest {
  format: 'oodgate-manifest-v1'
  subject_id: string
  channel_count: number
  sampling_rate: number
  events: ManifestEvent[]
  class_map: Record<string, ClassRole>
  data_path: string
  channel_names: string[]
}

export interface DatasetIndexSubject {
  subject_id: string
  train: string[]
  test: string[]
  features?: Record<string, string>
}

export interface DatasetIndex {
  format: 'oodgate-index-v1'
  dataset: string
  subjects: DatasetIndexSubject[]
}

export interface FeatureFileHeader {
  format: 'oodgate-features-v1'
  d: number
  K: number
  frame_count: number
}
