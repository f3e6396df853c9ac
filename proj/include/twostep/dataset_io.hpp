#ifndef TWOSTEP_DATASET_IO_HPP
#define TWOSTEP_DATASET_IO_HPP

#include "twostep/core.hpp"

#include <json.hpp>

#include <iosfwd>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace twostep {

/// Sidecar declaration of item blocks and category counts:
///   {"blocks": [{"name": "eta1", "items": ["item.1", "item.2"]}, ...],
///    "categories": {"item.1": 2, ...} | 2}
struct ItemDeclaration {
  std::vector<std::pair<std::string, std::vector<std::string>>> blocks;
  std::map<std::string, int> categories;
  int default_categories = 0;

  int categories_of(const std::string& item) const;
};

ItemDeclaration parse_item_declaration(const nlohmann::json& j);
nlohmann::json to_json(const ItemDeclaration& decl);
ItemDeclaration declaration_of(const Dataset& data);

/// CSV with a header row. Columns item.<k> hold category codes 1..h_k,
/// z.<name> covariates, y.<name> outcomes, an optional `id` column unit
/// labels. Empty cells and "NA" are missing. Item columns not listed in the
/// declaration are ignored.
Dataset parse_dataset_csv(std::istream& in, const ItemDeclaration& decl);
Dataset read_dataset_csv(const std::string& path, const ItemDeclaration& decl);
void write_dataset_csv(const Dataset& data, std::ostream& out);

}  // namespace twostep

#endif  // TWOSTEP_DATASET_IO_HPP
