#include "twostep/dataset_io.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

namespace twostep {

int ItemDeclaration::categories_of(const std::string& item) const {
  auto it = categories.find(item);
  if (it != categories.end()) return it->second;
  if (default_categories > 0) return default_categories;
  throw InputError("no category count declared for " + item);
}

ItemDeclaration parse_item_declaration(const nlohmann::json& j) {
  ItemDeclaration decl;
  if (!j.is_object() || !j.contains("blocks")) throw InputError("item declaration needs a \"blocks\" entry");
  for (const auto& b : j.at("blocks")) {
    if (!b.contains("name") || !b.contains("items")) throw InputError("each item block needs \"name\" and \"items\"");
    decl.blocks.emplace_back(b.at("name").get<std::string>(), b.at("items").get<std::vector<std::string>>());
  }
  if (j.contains("categories")) {
    const auto& c = j.at("categories");
    if (c.is_number_integer()) {
      decl.default_categories = c.get<int>();
    } else {
      for (auto it = c.begin(); it != c.end(); ++it) decl.categories[it.key()] = it.value().get<int>();
    }
  } else {
    decl.default_categories = 2;
  }
  return decl;
}

nlohmann::json to_json(const ItemDeclaration& decl) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& [name, items] : decl.blocks) blocks.push_back({{"name", name}, {"items", items}});
  nlohmann::json out{{"blocks", blocks}};
  if (decl.categories.empty())
    out["categories"] = decl.default_categories;
  else
    out["categories"] = decl.categories;
  return out;
}

ItemDeclaration declaration_of(const Dataset& data) {
  ItemDeclaration decl;
  for (const auto& b : data.blocks) {
    std::vector<std::string> names;
    for (Index k : b.items) names.push_back(data.item_names[k]);
    decl.blocks.emplace_back(b.name, names);
  }
  for (Index k = 0; k < data.p(); ++k) decl.categories[data.item_names[k]] = data.categories[k];
  return decl;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  bool quoted = false;
  for (char ch : line) {
    if (ch == '"') {
      quoted = !quoted;
    } else if (ch == ',' && !quoted) {
      cells.push_back(cell);
      cell.clear();
    } else if (ch != '\r') {
      cell.push_back(ch);
    }
  }
  cells.push_back(cell);
  for (auto& c : cells) {
    const auto b = c.find_first_not_of(" \t");
    const auto e = c.find_last_not_of(" \t");
    c = (b == std::string::npos) ? std::string() : c.substr(b, e - b + 1);
  }
  return cells;
}

bool is_missing(const std::string& cell) { return cell.empty() || cell == "NA"; }

double parse_real(const std::string& cell, const std::string& column, Index row) {
  if (is_missing(cell)) return std::numeric_limits<double>::quiet_NaN();
  try {
    std::size_t used = 0;
    const double v = std::stod(cell, &used);
    if (used == cell.size()) return v;
  } catch (const std::exception&) {
  }
  throw InputError("column " + column + " row " + std::to_string(row + 1) + ": cannot parse '" + cell + "'");
}

int parse_code(const std::string& cell, const std::string& column, Index row) {
  if (is_missing(cell)) return kMissingItem;
  int v = 0;
  const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (res.ec != std::errc() || res.ptr != cell.data() + cell.size() || v < 1)
    throw InputError("column " + column + " row " + std::to_string(row + 1) + ": invalid item code '" + cell + "'");
  return v;
}

}  // namespace

Dataset parse_dataset_csv(std::istream& in, const ItemDeclaration& decl) {
  std::string line;
  if (!std::getline(in, line)) throw InputError("dataset is empty");
  const auto header = split_csv_line(line);
  std::map<std::string, Index> column;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (!column.emplace(header[c], static_cast<Index>(c)).second) throw InputError("duplicate column " + header[c]);
  }

  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != header.size())
      throw InputError("row " + std::to_string(rows.size() + 1) + " has " + std::to_string(cells.size()) +
                       " cells, header has " + std::to_string(header.size()));
    rows.push_back(std::move(cells));
  }
  const Index n = static_cast<Index>(rows.size());

  Dataset data;
  std::vector<Index> item_cols;
  for (const auto& [block_name, items] : decl.blocks) {
    ItemBlock block{block_name, {}};
    for (const auto& item : items) {
      auto it = column.find(item);
      if (it == column.end()) throw InputError("item column " + item + " not found in dataset");
      block.items.push_back(static_cast<Index>(data.item_names.size()));
      data.item_names.push_back(item);
      data.categories.push_back(decl.categories_of(item));
      item_cols.push_back(it->second);
    }
    data.blocks.push_back(std::move(block));
  }
  std::vector<Index> z_cols, y_cols;
  Index id_col = -1;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const auto& h = header[c];
    if (h.rfind("z.", 0) == 0) {
      data.covariate_names.push_back(h);
      z_cols.push_back(static_cast<Index>(c));
    } else if (h.rfind("y.", 0) == 0) {
      data.outcome_names.push_back(h);
      y_cols.push_back(static_cast<Index>(c));
    } else if (h == "id") {
      id_col = static_cast<Index>(c);
    }
  }

  data.items.resize(n, static_cast<Index>(item_cols.size()));
  data.covariates.resize(n, static_cast<Index>(z_cols.size()));
  data.outcomes.resize(n, static_cast<Index>(y_cols.size()));
  data.unit_ids.resize(n);
  for (Index i = 0; i < n; ++i) {
    const auto& r = rows[i];
    for (std::size_t k = 0; k < item_cols.size(); ++k)
      data.items(i, static_cast<Index>(k)) = parse_code(r[item_cols[k]], header[item_cols[k]], i);
    for (std::size_t k = 0; k < z_cols.size(); ++k)
      data.covariates(i, static_cast<Index>(k)) = parse_real(r[z_cols[k]], header[z_cols[k]], i);
    for (std::size_t k = 0; k < y_cols.size(); ++k)
      data.outcomes(i, static_cast<Index>(k)) = parse_real(r[y_cols[k]], header[y_cols[k]], i);
    data.unit_ids[i] = id_col >= 0 ? r[id_col] : std::to_string(i + 1);
  }
  data.validate();
  return data;
}

Dataset read_dataset_csv(const std::string& path, const ItemDeclaration& decl) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open dataset " + path);
  return parse_dataset_csv(in, decl);
}

void write_dataset_csv(const Dataset& data, std::ostream& out) {
  out << "id";
  for (const auto& name : data.item_names) out << ',' << name;
  for (const auto& name : data.covariate_names) out << ',' << name;
  for (const auto& name : data.outcome_names) out << ',' << name;
  out << '\n';
  char buf[64];
  auto real = [&](double v) {
    if (std::isnan(v)) return std::string("NA");
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (Index i = 0; i < data.n(); ++i) {
    out << (i < static_cast<Index>(data.unit_ids.size()) ? data.unit_ids[i] : std::to_string(i + 1));
    for (Index k = 0; k < data.p(); ++k) {
      out << ',';
      if (data.items(i, k) != kMissingItem) out << data.items(i, k);
    }
    for (Index k = 0; k < data.covariates.cols(); ++k) out << ',' << real(data.covariates(i, k));
    for (Index k = 0; k < data.outcomes.cols(); ++k) out << ',' << real(data.outcomes(i, k));
    out << '\n';
  }
}

}  // namespace twostep
