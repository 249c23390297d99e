#include "moelab/batching.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <unordered_set>

namespace moelab {

std::vector<std::int32_t> tokenize(const std::string& text) {
    std::vector<std::int32_t> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<std::int32_t>(c));
    return ids;
}

std::string detokenize(const std::vector<std::int32_t>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (auto id : ids) {
        if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
    }
    return out;
}

std::vector<Document> ingest_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("ingest_corpus: cannot open " + path);
    std::vector<Document> docs;
    std::unordered_set<std::string> ids;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError("ingest_corpus: malformed record at line " + std::to_string(lineno) +
                            ": " + e.what());
        }
        if (!j.contains("id") || !j.contains("text")) {
            throw DataError("ingest_corpus: line " + std::to_string(lineno) +
                            " missing id or text field");
        }
        Document d;
        d.id = j["id"].is_string() ? j["id"].get<std::string>() : j["id"].dump();
        d.text = j["text"].get<std::string>();
        if (j.contains("domain") && j["domain"].is_string())
            d.domain = j["domain"].get<std::string>();
        if (d.text.empty())
            throw DataError("ingest_corpus: empty text for document " + d.id + " at line " +
                            std::to_string(lineno));
        if (!ids.insert(d.id).second)
            throw DataError("ingest_corpus: duplicate document id " + d.id);
        docs.push_back(std::move(d));
    }
    return docs;
}

namespace {

constexpr std::size_t kHashedDim = 256;

std::uint64_t word_hash(const std::string& w) {
    // FNV-1a followed by a multiplicative mix
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : w) {
        h ^= c;
        h *= 1099511628211ull;
    }
    h ^= h >> 33;
    h *= 0xff51afd7ed558ccdull;
    h ^= h >> 33;
    return h;
}

}  // namespace

std::vector<EmbeddedDoc> embed_documents(const std::vector<Document>& docs, EmbedderKind kind,
                                         const std::string& embeddings_path) {
    if (docs.empty()) throw DataError("embed_documents: empty corpus");
    std::vector<EmbeddedDoc> out;
    if (kind == EmbedderKind::File) {
        std::ifstream in(embeddings_path, std::ios::binary);
        if (!in) throw DataError("embed_documents: cannot open " + embeddings_path);
        std::uint32_t count = 0, dim = 0;
        in.read(reinterpret_cast<char*>(&count), 4);
        in.read(reinterpret_cast<char*>(&dim), 4);
        if (!in || count != docs.size() || dim == 0) {
            throw DataError("embed_documents: embeddings header (" + std::to_string(count) + "," +
                            std::to_string(dim) + ") does not match corpus of " +
                            std::to_string(docs.size()) + " docs");
        }
        std::vector<float> row(dim);
        for (const auto& d : docs) {
            in.read(reinterpret_cast<char*>(row.data()), std::streamsize(dim * sizeof(float)));
            if (!in) throw DataError("embed_documents: truncated embeddings file");
            EmbeddedDoc e;
            e.id = d.id;
            e.embedding.assign(row.begin(), row.end());
            double norm = std::sqrt(std::inner_product(e.embedding.begin(), e.embedding.end(),
                                                       e.embedding.begin(), 0.0));
            if (norm == 0.0) {
                std::cerr << "warning: zero embedding for doc " << d.id
                          << ", assigning reserved basis vector\n";
                e.embedding.assign(dim, 0.0);
                e.embedding[0] = 1.0;
            } else {
                for (auto& v : e.embedding) v /= norm;
            }
            out.push_back(std::move(e));
        }
        return out;
    }
    // Hashed bag-of-words: lowercase alphanumeric words hashed into 256
    // buckets, counts L2-normalized.
    for (const auto& d : docs) {
        EmbeddedDoc e;
        e.id = d.id;
        e.embedding.assign(kHashedDim, 0.0);
        std::string word;
        auto flush = [&] {
            if (!word.empty()) {
                e.embedding[word_hash(word) % kHashedDim] += 1.0;
                word.clear();
            }
        };
        for (unsigned char c : d.text) {
            if (std::isalnum(c)) word.push_back(static_cast<char>(std::tolower(c)));
            else flush();
        }
        flush();
        double norm = std::sqrt(std::inner_product(e.embedding.begin(), e.embedding.end(),
                                                   e.embedding.begin(), 0.0));
        if (norm == 0.0) {
            std::cerr << "warning: document " << d.id
                      << " has no words, assigning reserved basis vector\n";
            e.embedding[0] = 1.0;
        } else {
            for (auto& v : e.embedding) v /= norm;
        }
        out.push_back(std::move(e));
    }
    return out;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ContractError("cosine: dimension mismatch");
    const double dot = std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
    const double na = std::sqrt(std::inner_product(a.begin(), a.end(), a.begin(), 0.0));
    const double nb = std::sqrt(std::inner_product(b.begin(), b.end(), b.begin(), 0.0));
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (na * nb);
}

std::vector<std::vector<std::size_t>> top_k_neighbors(const std::vector<EmbeddedDoc>& embeds,
                                                      std::size_t k) {
    const std::size_t n = embeds.size();
    if (n > 0 && k >= n) k = n - 1;  // a doc has at most n-1 neighbors
    std::vector<std::vector<std::size_t>> out(n);
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < n; ++i) {
        idx.clear();
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) idx.push_back(j);
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            const double ca = cosine(embeds[i].embedding, embeds[a].embedding);
            const double cb = cosine(embeds[i].embedding, embeds[b].embedding);
            if (ca != cb) return ca > cb;
            return embeds[a].id < embeds[b].id;
        });
        out[i].assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
    }
    return out;
}

std::vector<std::size_t> greedy_chain(const std::vector<EmbeddedDoc>& embeds,
                                      const std::vector<std::vector<std::size_t>>& neighbors) {
    const std::size_t n = embeds.size();
    if (n == 0) return {};
    std::vector<bool> visited(n, false);
    auto lowest_unvisited = [&]() {
        std::size_t best = n;
        for (std::size_t i = 0; i < n; ++i) {
            if (visited[i] && best != n) continue;
            if (!visited[i] && (best == n || embeds[i].id < embeds[best].id)) best = i;
        }
        return best;
    };
    std::vector<std::size_t> order;
    std::size_t cur = lowest_unvisited();
    visited[cur] = true;
    order.push_back(cur);
    while (order.size() < n) {
        std::size_t next = n;
        double best_cos = 0.0;
        for (std::size_t cand : neighbors[cur]) {
            if (visited[cand]) continue;
            const double c = cosine(embeds[cur].embedding, embeds[cand].embedding);
            if (next == n || c > best_cos ||
                (c == best_cos && embeds[cand].id < embeds[next].id)) {
                next = cand;
                best_cos = c;
            }
        }
        if (next == n) {
            // neighbor list exhausted: exact search over all unvisited docs
            for (std::size_t cand = 0; cand < n; ++cand) {
                if (visited[cand]) continue;
                const double c = cosine(embeds[cur].embedding, embeds[cand].embedding);
                if (next == n || c > best_cos ||
                    (c == best_cos && embeds[cand].id < embeds[next].id)) {
                    next = cand;
                    best_cos = c;
                }
            }
        }
        visited[next] = true;
        order.push_back(next);
        cur = next;
    }
    return order;
}

double mean_adjacent_cosine(const std::vector<EmbeddedDoc>& embeds,
                            const std::vector<std::size_t>& ordering) {
    if (ordering.size() < 2) return 0.0;
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < ordering.size(); ++i)
        acc += cosine(embeds[ordering[i]].embedding, embeds[ordering[i + 1]].embedding);
    return acc / static_cast<double>(ordering.size() - 1);
}

std::vector<TrainingInstance> pack_instances(const std::vector<Document>& docs,
                                             const std::vector<std::size_t>& ordering,
                                             std::size_t context_length,
                                             const std::string& mode) {
    if (context_length < 2) throw ConfigError("pack_instances: context length must be >= 2");
    if (ordering.size() != docs.size())
        throw ContractError("pack_instances: ordering must be a permutation of the corpus");
    // Token stream with per-token provenance; the separator after a document
    // is attributed to that document.
    std::vector<std::int32_t> stream;
    std::vector<std::size_t> owner;  // doc index per token
    for (std::size_t pos = 0; pos < ordering.size(); ++pos) {
        const std::size_t di = ordering[pos];
        auto ids = tokenize(docs[di].text);
        for (auto id : ids) {
            stream.push_back(id);
            owner.push_back(di);
        }
        if (pos + 1 < ordering.size()) {
            stream.push_back(kSepToken);
            owner.push_back(di);
        }
    }
    std::vector<TrainingInstance> out;
    const std::size_t count = stream.size() / context_length;
    if (count == 0)
        std::cerr << "warning: corpus has " << stream.size() << " tokens, fewer than "
                  << context_length << "; no instances produced\n";
    for (std::size_t i = 0; i < count; ++i) {
        TrainingInstance inst;
        inst.batching_mode = mode;
        const std::size_t base = i * context_length;
        inst.tokens.assign(stream.begin() + static_cast<std::ptrdiff_t>(base),
                           stream.begin() + static_cast<std::ptrdiff_t>(base + context_length));
        std::size_t span_begin = 0;
        for (std::size_t t = 1; t <= context_length; ++t) {
            if (t == context_length || owner[base + t] != owner[base + span_begin]) {
                ProvenanceSpan s;
                s.doc_id = docs[owner[base + span_begin]].id;
                s.domain = docs[owner[base + span_begin]].domain;
                s.begin = span_begin;
                s.end = t;
                inst.provenance.push_back(std::move(s));
                span_begin = t;
            }
        }
        out.push_back(std::move(inst));
    }
    return out;
}

std::vector<TrainingInstance> random_batching(const std::vector<Document>& docs,
                                              std::size_t context_length, std::uint64_t seed) {
    std::vector<std::size_t> order(docs.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    return pack_instances(docs, order, context_length, "rand");
}

namespace {

void write_u32(std::ofstream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<char*>(b), 4);
}

std::uint32_t read_u32(std::ifstream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw DataError("instances file: truncated");
    return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
           (std::uint32_t(b[3]) << 24);
}

}  // namespace

void write_instances(const std::string& path, const std::vector<TrainingInstance>& instances,
                     const InstancesHeader& header) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("write_instances: cannot open " + path);
    nlohmann::json j{{"L", header.context_length},
                     {"V", header.vocab_size},
                     {"mode", header.mode},
                     {"seed", header.seed},
                     {"count", instances.size()}};
    const std::string hs = j.dump();
    out.write("MOEI", 4);
    write_u32(out, 1);
    write_u32(out, static_cast<std::uint32_t>(hs.size()));
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& inst : instances) {
        if (inst.tokens.size() != header.context_length)
            throw ContractError("write_instances: instance length mismatch");
        for (auto id : inst.tokens) write_u32(out, static_cast<std::uint32_t>(id));
    }
    std::ofstream prov(path + ".prov.jsonl");
    if (!prov) throw DataError("write_instances: cannot open " + path + ".prov.jsonl");
    for (std::size_t i = 0; i < instances.size(); ++i) {
        nlohmann::json spans = nlohmann::json::array();
        for (const auto& s : instances[i].provenance) {
            spans.push_back({{"id", s.doc_id},
                             {"domain", s.domain},
                             {"begin", s.begin},
                             {"end", s.end}});
        }
        prov << nlohmann::json{{"instance", i}, {"spans", spans}}.dump() << "\n";
    }
}

std::vector<TrainingInstance> read_instances(const std::string& path,
                                             InstancesHeader* header_out) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("read_instances: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "MOEI", 4) != 0)
        throw DataError("read_instances: bad magic in " + path);
    const std::uint32_t version = read_u32(in);
    if (version != 1) throw DataError("read_instances: unsupported version");
    const std::uint32_t hlen = read_u32(in);
    std::string hs(hlen, '\0');
    in.read(hs.data(), hlen);
    if (!in) throw DataError("read_instances: truncated header");
    InstancesHeader h;
    try {
        auto j = nlohmann::json::parse(hs);
        h.context_length = j.at("L").get<std::size_t>();
        h.vocab_size = j.at("V").get<std::size_t>();
        h.mode = j.at("mode").get<std::string>();
        h.seed = j.at("seed").get<std::uint64_t>();
        h.count = j.at("count").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("read_instances: bad header: ") + e.what());
    }
    std::vector<TrainingInstance> out(h.count);
    for (auto& inst : out) {
        inst.batching_mode = h.mode;
        inst.tokens.resize(h.context_length);
        for (auto& id : inst.tokens) id = static_cast<std::int32_t>(read_u32(in));
    }
    // provenance sidecar is optional on read
    std::ifstream prov(path + ".prov.jsonl");
    if (prov) {
        std::string line;
        std::size_t i = 0;
        while (std::getline(prov, line) && i < out.size()) {
            if (line.empty()) continue;
            auto j = nlohmann::json::parse(line);
            for (const auto& sj : j.at("spans")) {
                ProvenanceSpan s;
                s.doc_id = sj.at("id").get<std::string>();
                s.domain = sj.at("domain").get<std::string>();
                s.begin = sj.at("begin").get<std::size_t>();
                s.end = sj.at("end").get<std::size_t>();
                out[i].provenance.push_back(std::move(s));
            }
            ++i;
        }
    }
    if (header_out) *header_out = h;
    return out;
}

void write_embeddings(const std::string& path, const std::vector<EmbeddedDoc>& embeds) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("write_embeddings: cannot open " + path);
    const std::uint32_t count = static_cast<std::uint32_t>(embeds.size());
    const std::uint32_t dim = embeds.empty() ? 0 : static_cast<std::uint32_t>(embeds[0].embedding.size());
    out.write(reinterpret_cast<const char*>(&count), 4);
    out.write(reinterpret_cast<const char*>(&dim), 4);
    for (const auto& e : embeds) {
        for (double v : e.embedding) {
            float f = static_cast<float>(v);
            out.write(reinterpret_cast<const char*>(&f), 4);
        }
    }
}

}  // namespace moelab
