#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moelab/errors.hpp"

namespace moelab {

// Byte-level tokenizer: ids 0..255 are raw bytes, 256 separates documents,
// 257 is reserved padding. Vocab size 258.
constexpr std::int32_t kSepToken = 256;
constexpr std::int32_t kPadToken = 257;
constexpr std::size_t kByteVocabSize = 258;

std::vector<std::int32_t> tokenize(const std::string& text);
std::string detokenize(const std::vector<std::int32_t>& ids);

struct Document {
    std::string id;
    std::string text;
    std::string domain;  // optional, empty if absent
};

struct EmbeddedDoc {
    std::string id;
    std::vector<double> embedding;  // unit L2 norm
};

struct ProvenanceSpan {
    std::string doc_id;
    std::string domain;
    std::size_t begin = 0;  // [begin, end) within the instance
    std::size_t end = 0;
};

struct TrainingInstance {
    std::vector<std::int32_t> tokens;  // exactly L
    std::vector<ProvenanceSpan> provenance;
    std::string batching_mode;
};

// Line-delimited JSON records {"id":..., "text":..., "domain":...}.
std::vector<Document> ingest_corpus(const std::string& path);

enum class EmbedderKind { HashedBow, File };

std::vector<EmbeddedDoc> embed_documents(const std::vector<Document>& docs,
                                         EmbedderKind kind = EmbedderKind::HashedBow,
                                         const std::string& embeddings_path = {});

// Exact search; per doc, the k most similar other docs by cosine, best first.
std::vector<std::vector<std::size_t>> top_k_neighbors(const std::vector<EmbeddedDoc>& embeds,
                                                      std::size_t k);

// Greedy highest-cosine chain over the corpus. Searches the tail's neighbor
// list first and falls back to exact search over unvisited docs when the list
// is exhausted. Start and restarts pick the lowest unvisited doc id.
std::vector<std::size_t> greedy_chain(const std::vector<EmbeddedDoc>& embeds,
                                      const std::vector<std::vector<std::size_t>>& neighbors);

std::vector<TrainingInstance> pack_instances(const std::vector<Document>& docs,
                                             const std::vector<std::size_t>& ordering,
                                             std::size_t context_length,
                                             const std::string& mode = "sim");

std::vector<TrainingInstance> random_batching(const std::vector<Document>& docs,
                                              std::size_t context_length, std::uint64_t seed);

double cosine(const std::vector<double>& a, const std::vector<double>& b);

// Mean cosine over adjacent pairs of an ordering (chain quality metric).
double mean_adjacent_cosine(const std::vector<EmbeddedDoc>& embeds,
                            const std::vector<std::size_t>& ordering);

// Instances file: "MOEI" magic, u32 version, u32 JSON header length, JSON
// manifest {L, V, mode, seed, count}, then count*L little-endian u32 token
// ids. Provenance goes to <path>.prov.jsonl.
struct InstancesHeader {
    std::size_t context_length = 0;
    std::size_t vocab_size = 0;
    std::string mode;
    std::uint64_t seed = 0;
    std::size_t count = 0;
};

void write_instances(const std::string& path, const std::vector<TrainingInstance>& instances,
                     const InstancesHeader& header);
std::vector<TrainingInstance> read_instances(const std::string& path, InstancesHeader* header_out = nullptr);

// Optional external embeddings: u32 count, u32 dim, then count*dim
// little-endian float32 rows (row order matches the corpus file).
void write_embeddings(const std::string& path, const std::vector<EmbeddedDoc>& embeds);

}  // namespace moelab
